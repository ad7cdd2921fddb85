//! Constant-Q transform front end.
//!
//! Bin `k` has center frequency `f_min * 2^(k / B)` and a Hann-windowed complex
//! exponential kernel of `N_k = round(Q * sr / f_k)` samples, with
//! `Q = 1 / (2^(1/B) - 1)`. The window is normalized to unit sum, so a complex
//! exponential of amplitude `A` at a bin center has magnitude `A` in that bin
//! (a real sinusoid `A/2`). Frame `t` is centered on sample `t * hop`; samples
//! outside the signal count as zero. Values are `ln(|X| + log_floor)`.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::KvMap;
use crate::error::{Error, Result};
use crate::tensor::{write_tensor, Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config("waveform has non-finite samples".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Reads a mono WAV (integer PCM up to 32 bits, or 32-bit float).
    pub fn read_wav(path: &Path) -> Result<Self> {
        let mut reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(Error::Config(format!(
                "{}: expected mono audio, found {} channels",
                path.display(),
                spec.channels
            )));
        }
        let samples = match spec.sample_format {
            hound::SampleFormat::Int => {
                let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
                reader
                    .samples::<i32>()
                    .map(|s| s.map(|v| v as f64 / scale))
                    .collect::<std::result::Result<Vec<_>, _>>()?
            }
            hound::SampleFormat::Float => {
                reader.samples::<f32>().map(|s| s.map(f64::from)).collect::<std::result::Result<Vec<_>, _>>()?
            }
        };
        Self::new(samples, spec.sample_rate)
    }

    /// Writes 16-bit mono PCM; samples are clipped to [-1, 1].
    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
        }
        w.finalize()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CqtConfig {
    /// Frame step in seconds.
    pub hop: f64,
    pub octaves: usize,
    pub bins_per_octave: usize,
    pub f_min: f64,
    pub target_frames: usize,
    pub log_floor: f64,
}

impl Default for CqtConfig {
    fn default() -> Self {
        Self { hop: 0.016, octaves: 9, bins_per_octave: 48, f_min: 15.0, target_frames: 400, log_floor: 1e-10 }
    }
}

impl CqtConfig {
    pub fn bins(&self) -> usize {
        self.octaves * self.bins_per_octave
    }

    pub fn q(&self) -> f64 {
        1.0 / (2f64.powf(1.0 / self.bins_per_octave as f64) - 1.0)
    }

    pub fn bin_frequency(&self, k: f64) -> f64 {
        self.f_min * 2f64.powf(k / self.bins_per_octave as f64)
    }

    /// Hop in samples; `hop * sample_rate` must be a positive integer.
    pub fn hop_samples(&self, sample_rate: u32) -> Result<usize> {
        let h = self.hop * sample_rate as f64;
        let r = h.round();
        if r < 1.0 || (h - r).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "hop {} s is not a whole number of samples at {sample_rate} Hz",
                self.hop
            )));
        }
        Ok(r as usize)
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        if self.octaves == 0 || self.bins_per_octave == 0 || self.target_frames == 0 {
            return Err(Error::Config("octaves, bins per octave and target frames must be positive".into()));
        }
        if !(self.f_min > 0.0) || !(self.log_floor > 0.0) {
            return Err(Error::Config("f_min and log_floor must be positive".into()));
        }
        let top = self.f_min * 2f64.powi(self.octaves as i32);
        let nyquist = sample_rate as f64 / 2.0;
        if top > nyquist {
            return Err(Error::Config(format!(
                "f_min {} Hz spanning {} octaves reaches {top} Hz, above Nyquist {nyquist} Hz",
                self.f_min, self.octaves
            )));
        }
        self.hop_samples(sample_rate).map(|_| ())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.set("f_min", self.f_min);
        kv.set("hop", self.hop);
        kv.set("octaves", self.octaves);
        kv.set("bins_per_octave", self.bins_per_octave);
        kv.set("target_frames", self.target_frames);
        kv.set("log_floor", self.log_floor);
        kv
    }

    pub fn merge_kv(mut self, kv: &KvMap) -> Result<Self> {
        kv.update("f_min", &mut self.f_min)?;
        kv.update("hop", &mut self.hop)?;
        kv.update("octaves", &mut self.octaves)?;
        kv.update("bins_per_octave", &mut self.bins_per_octave)?;
        kv.update("target_frames", &mut self.target_frames)?;
        kv.update("log_floor", &mut self.log_floor)?;
        Ok(self)
    }
}

/// Log-magnitude CQT, stored bin-major (`values[k * frames + t]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub bins: usize,
    pub frames: usize,
    pub values: Vec<f64>,
    pub freqs: Vec<f64>,
}

impl Spectrogram {
    pub fn get(&self, k: usize, t: usize) -> f64 {
        self.values[k * self.frames + t]
    }

    /// Bin of largest value in frame `t`.
    pub fn argmax(&self, t: usize) -> usize {
        (0..self.bins).max_by(|&a, &b| self.get(a, t).total_cmp(&self.get(b, t))).unwrap()
    }

    /// `[bins, frames]` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.bins, self.frames], |i| T::of(self.values[i]))
    }
}

struct Kernel {
    re: Vec<f64>,
    im: Vec<f64>,
}

/// Precomputed kernel bank for one configuration and sample rate.
pub struct Cqt {
    cfg: CqtConfig,
    sample_rate: u32,
    hop: usize,
    freqs: Vec<f64>,
    kernels: Vec<Kernel>,
}

impl Cqt {
    pub fn new(cfg: &CqtConfig, sample_rate: u32) -> Result<Self> {
        cfg.validate(sample_rate)?;
        let sr = sample_rate as f64;
        let q = cfg.q();
        let freqs: Vec<f64> = (0..cfg.bins()).map(|k| cfg.bin_frequency(k as f64)).collect();
        let kernels = freqs
            .iter()
            .map(|&f| {
                let n = ((q * sr / f).round() as usize).max(1);
                let half = (n / 2) as f64;
                let win: Vec<f64> = (0..n)
                    .map(|m| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * (m as f64 + 0.5) / n as f64).cos())
                    .collect();
                let norm: f64 = win.iter().sum();
                let (mut re, mut im) = (Vec::with_capacity(n), Vec::with_capacity(n));
                for (m, w) in win.iter().enumerate() {
                    let phase = 2.0 * std::f64::consts::PI * f * (m as f64 - half) / sr;
                    re.push(w / norm * phase.cos());
                    im.push(-w / norm * phase.sin());
                }
                Kernel { re, im }
            })
            .collect();
        Ok(Self { cfg: cfg.clone(), sample_rate, hop: cfg.hop_samples(sample_rate)?, freqs, kernels })
    }

    pub fn config(&self) -> &CqtConfig {
        &self.cfg
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn frame_count(&self, samples: usize) -> usize {
        1 + samples / self.hop
    }

    pub fn transform(&self, w: &Waveform) -> Result<Spectrogram> {
        if w.sample_rate != self.sample_rate {
            return Err(Error::Config(format!(
                "waveform at {} Hz, transform built for {} Hz",
                w.sample_rate, self.sample_rate
            )));
        }
        if w.samples.is_empty() {
            return Err(Error::Config("empty waveform".into()));
        }
        let x = &w.samples;
        let frames = self.frame_count(x.len());
        let mut values = vec![0.0; self.freqs.len() * frames];
        for (k, kernel) in self.kernels.iter().enumerate() {
            let n = kernel.re.len();
            let half = (n / 2) as isize;
            for t in 0..frames {
                let start = (t * self.hop) as isize - half;
                let m0 = (-start).max(0) as usize;
                let m1 = (x.len() as isize - start).clamp(0, n as isize) as usize;
                let (re, im) = if m0 < m1 {
                    let seg = &x[(start + m0 as isize) as usize..(start + m1 as isize) as usize];
                    dot2(seg, &kernel.re[m0..m1], &kernel.im[m0..m1])
                } else {
                    (0.0, 0.0)
                };
                values[k * frames + t] = (re.hypot(im) + self.cfg.log_floor).ln();
            }
        }
        Ok(Spectrogram { bins: self.freqs.len(), frames, values, freqs: self.freqs.clone() })
    }

    /// CQT fixed to `target_frames`, as a `[bins, frames]` f32 tensor.
    pub fn features(&self, w: &Waveform) -> Result<Tensor<f32>> {
        Ok(fix_frames(&self.transform(w)?, self.cfg.target_frames)?.to_tensor())
    }
}

/// `(sum x*a, sum x*b)` with four interleaved partial sums.
fn dot2(x: &[f64], a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut ra = [0.0; 4];
    let mut rb = [0.0; 4];
    let chunks = x.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        for j in 0..4 {
            ra[j] += x[i + j] * a[i + j];
            rb[j] += x[i + j] * b[i + j];
        }
    }
    let (mut sa, mut sb) = ((ra[0] + ra[1]) + (ra[2] + ra[3]), (rb[0] + rb[1]) + (rb[2] + rb[3]));
    for i in chunks * 4..x.len() {
        sa += x[i] * a[i];
        sb += x[i] * b[i];
    }
    (sa, sb)
}

pub fn cqt(w: &Waveform, cfg: &CqtConfig) -> Result<Spectrogram> {
    Cqt::new(cfg, w.sample_rate)?.transform(w)
}

/// Keeps the first `target` frames, or tiles the whole sequence end to end
/// and truncates at `target`.
pub fn fix_frames(spec: &Spectrogram, target: usize) -> Result<Spectrogram> {
    if spec.frames == 0 || target == 0 {
        return Err(Error::Dimension("fix_frames needs at least one frame".into()));
    }
    let mut values = Vec::with_capacity(spec.bins * target);
    for k in 0..spec.bins {
        let row = &spec.values[k * spec.frames..(k + 1) * spec.frames];
        values.extend((0..target).map(|t| row[t % spec.frames]));
    }
    Ok(Spectrogram { bins: spec.bins, frames: target, values, freqs: spec.freqs.clone() })
}

/// Outcome of extracting one utterance.
#[derive(Clone, Debug)]
pub struct Extracted {
    pub wav: PathBuf,
    pub feature: PathBuf,
    pub raw_frames: usize,
}

/// Extracts fixed-size features for every `(wav, output)` pair in parallel.
/// The kernel bank is built once per distinct sample rate.
pub fn extract_files(jobs: &[(PathBuf, PathBuf)], cfg: &CqtConfig) -> Result<Vec<Extracted>> {
    let Some((first, _)) = jobs.first() else { return Ok(Vec::new()) };
    let shared = Cqt::new(cfg, Waveform::read_wav(first)?.sample_rate)?;
    jobs.par_iter()
        .map(|(wav_path, out)| {
            let w = Waveform::read_wav(wav_path)?;
            let own;
            let bank = if w.sample_rate == shared.sample_rate {
                &shared
            } else {
                own = Cqt::new(cfg, w.sample_rate)?;
                &own
            };
            let spec = bank.transform(&w)?;
            write_tensor(out, &fix_frames(&spec, cfg.target_frames)?.to_tensor::<f32>())?;
            Ok(Extracted { wav: wav_path.clone(), feature: out.clone(), raw_frames: spec.frames })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const SR: u32 = 16_000;

    fn tone(freqs: &[f64], secs: f64, amp: f64) -> Waveform {
        let n = (secs * SR as f64) as usize;
        let samples = (0..n)
            .map(|i| {
                let t = i as f64 / SR as f64;
                freqs.iter().map(|f| amp * (2.0 * std::f64::consts::PI * f * t).sin()).sum()
            })
            .collect();
        Waveform::new(samples, SR).unwrap()
    }

    fn spec_of(frames: usize) -> Spectrogram {
        Spectrogram { bins: 2, frames, values: (0..2 * frames).map(|i| i as f64).collect(), freqs: vec![1.0, 2.0] }
    }

    #[test]
    fn zero_waveform_is_log_floor() {
        let cfg = CqtConfig::default();
        let s = cqt(&Waveform::new(vec![0.0; 1600], SR).unwrap(), &cfg).unwrap();
        assert_eq!((s.bins, s.frames), (432, 7));
        assert!(s.values.iter().all(|&v| v == 1e-10f64.ln()));
    }

    #[test]
    fn tone_lands_in_its_bin() {
        let cfg = CqtConfig::default();
        let bank = Cqt::new(&cfg, SR).unwrap();
        for k in [150usize, 260, 400] {
            let s = bank.transform(&tone(&[cfg.bin_frequency(k as f64)], 1.0, 0.5)).unwrap();
            for t in 10..s.frames - 10 {
                assert!(s.argmax(t).abs_diff(k) <= 1, "bin {k} frame {t}: {}", s.argmax(t));
            }
        }
    }

    #[test]
    fn octave_apart_tones_peak_48_bins_apart() {
        let cfg = CqtConfig::default();
        let k = 300usize;
        let s = cqt(&tone(&[cfg.bin_frequency(k as f64), cfg.bin_frequency((k - 48) as f64)], 1.0, 0.3), &cfg).unwrap();
        let t = s.frames / 2;
        let peaks: Vec<usize> = (1..s.bins - 1)
            .filter(|&b| s.get(b, t) > s.get(b - 1, t) && s.get(b, t) >= s.get(b + 1, t) && s.get(b, t) > -3.0)
            .collect();
        assert_eq!(peaks, vec![k - 48, k]);
    }

    #[test]
    fn doubling_amplitude_shifts_by_ln2() {
        let bank = Cqt::new(&CqtConfig::default(), SR).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let noise: Vec<f64> = (0..8000).map(|_| rand::Rng::random_range(&mut rng, -0.2..0.2)).collect();
        let a = bank.transform(&Waveform::new(noise.clone(), SR).unwrap()).unwrap();
        let b = bank.transform(&Waveform::new(noise.iter().map(|v| 2.0 * v).collect(), SR).unwrap()).unwrap();
        let t = a.frames / 2;
        let audible: Vec<usize> = (0..432).filter(|&k| a.get(k, t) > 1e-4f64.ln()).collect();
        assert!(audible.len() > 400, "{}", audible.len());
        for k in audible {
            assert!((b.get(k, t) - a.get(k, t) - 2f64.ln()).abs() < 1e-6, "bin {k}");
        }
    }

    #[test]
    fn deterministic() {
        let cfg = CqtConfig::default();
        let w = tone(&[440.0], 0.3, 0.5);
        assert_eq!(cqt(&w, &cfg).unwrap(), cqt(&w, &cfg).unwrap());
    }

    #[test]
    fn fixed_features_are_always_432_by_400() {
        let bank = Cqt::new(&CqtConfig::default(), SR).unwrap();
        for n in [1usize, 255, 256, 16_000, 110_000] {
            let w = Waveform::new((0..n).map(|i| ((i * 31 % 17) as f64 - 8.0) / 10.0).collect(), SR).unwrap();
            assert_eq!(bank.features(&w).unwrap().shape(), &[432, 400]);
        }
    }

    #[test]
    fn config_kv_round_trip() {
        let cfg = CqtConfig { f_min: 20.0, hop: 0.01, ..CqtConfig::default() };
        assert_eq!(CqtConfig::default().merge_kv(&cfg.to_kv()).unwrap(), cfg);
    }

    #[test]
    fn fix_frames_rules() {
        let same = spec_of(400);
        assert_eq!(fix_frames(&same, 400).unwrap(), same);
        let short = fix_frames(&spec_of(150), 400).unwrap();
        let want: Vec<f64> = (0..400).map(|t| (t % 150) as f64).collect();
        assert_eq!(&short.values[..400], &want[..]);
        assert_eq!(short.values[400], 150.0);
        let long = fix_frames(&spec_of(1000), 400).unwrap();
        assert_eq!(&long.values[..400], &(0..400).map(|t| t as f64).collect::<Vec<_>>()[..]);
        assert_eq!(long.values[400], 1000.0);
        for f in [1, 150, 400, 1000] {
            let once = fix_frames(&spec_of(f), 400).unwrap();
            assert_eq!(fix_frames(&once, 400).unwrap(), once);
        }
        assert!(fix_frames(&spec_of(0), 400).is_err());
    }

    #[test]
    fn rejects_bad_configs() {
        let cfg = CqtConfig { f_min: 20.0, ..CqtConfig::default() };
        assert!(matches!(Cqt::new(&cfg, SR), Err(Error::Config(_))));
        assert!(Cqt::new(&CqtConfig { hop: 0.0161, ..CqtConfig::default() }, SR).is_err());
        assert!(cqt(&Waveform { samples: vec![], sample_rate: SR }, &CqtConfig::default()).is_err());
        assert!(Waveform::new(vec![f64::NAN], SR).is_err());
    }

    #[test]
    fn wav_round_trip_and_extraction() {
        let dir = tempfile::tempdir().unwrap();
        let w = tone(&[500.0], 0.2, 0.5);
        let p = dir.path().join("a.wav");
        w.write_wav(&p).unwrap();
        let back = Waveform::read_wav(&p).unwrap();
        assert_eq!(back.samples.len(), w.samples.len());
        assert!(back.samples.iter().zip(&w.samples).all(|(a, b)| (a - b).abs() < 1.0 / 32000.0));
        let out = dir.path().join("a.feat");
        let done = extract_files(&[(p, out.clone())], &CqtConfig::default()).unwrap();
        assert_eq!(done[0].raw_frames, 1 + 3200 / 256);
        let t: Tensor<f32> = crate::tensor::read_tensor(&out).unwrap();
        assert_eq!(t.shape(), &[432, 400]);
    }
}
