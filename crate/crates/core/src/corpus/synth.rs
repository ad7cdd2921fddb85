//! Synthetic bonafide/spoof corpus.
//!
//! Bonafide utterances are harmonic stacks (kept below 4.5 kHz) on a
//! vibrato-modulated F0 with a syllabic envelope, plus pink noise. Spoof
//! utterances come from the same generator with injected artifacts:
//!
//! * phase discontinuities: every `period` samples each harmonic's phase jumps,
//!   which puts a periodic broadband click train above the harmonic band;
//! * notch comb: `s[n] - g * s[n - lag]`, notches every `sr / lag` Hz;
//! * quantized F0: the contour is rounded to a grid of `step` semitones.
//!
//! Every spoof carries phase discontinuities; attacks differ in which other
//! artifacts they add and in the sub-band of periods they draw from. The
//! train and dev splits use the `seen` parameter ranges (attacks A01-A06) and
//! the eval split uses the disjoint `unseen` ranges (attacks A07-A10).

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::protocol::{write_protocol, Trial};
use crate::config::KvMap;
use crate::error::{Error, Result};
use crate::features::Waveform;
use crate::metrics::BONAFIDE_KEY;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Dev,
    Eval,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Eval => "eval",
        }
    }

    fn prefix(self) -> char {
        match self {
            Split::Train => 'T',
            Split::Dev => 'D',
            Split::Eval => 'E',
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

/// Parameter ranges (inclusive) from which spoof artifacts are drawn.
#[derive(Clone, Debug, PartialEq)]
pub struct ArtifactRanges {
    /// Samples between phase discontinuities.
    pub period: (usize, usize),
    /// Delay of the notch comb, in samples.
    pub notch_lag: (usize, usize),
    /// F0 quantization step, in semitones.
    pub quant_step: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub sample_rate: u32,
    /// Utterance duration range in seconds.
    pub duration: (f64, f64),
    /// `(bonafide, spoof)` counts.
    pub train: (usize, usize),
    pub dev: (usize, usize),
    pub eval: (usize, usize),
    pub speakers_per_split: usize,
    pub snr_db: (f64, f64),
    pub notch_gain: (f64, f64),
    pub seen: ArtifactRanges,
    pub unseen: ArtifactRanges,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            sample_rate: 16_000,
            duration: (1.0, 1.0),
            train: (200, 200),
            dev: (50, 50),
            eval: (50, 50),
            speakers_per_split: 8,
            snr_db: (20.0, 30.0),
            notch_gain: (0.6, 0.9),
            seen: ArtifactRanges { period: (120, 360), notch_lag: (8, 16), quant_step: (0.5, 1.0) },
            unseen: ArtifactRanges { period: (400, 640), notch_lag: (20, 28), quant_step: (1.5, 2.5) },
        }
    }
}

fn disjoint<T: PartialOrd>(a: (T, T), b: (T, T)) -> bool {
    a.1 < b.0 || b.1 < a.0
}

impl SynthConfig {
    pub fn counts(&self, split: Split) -> (usize, usize) {
        match split {
            Split::Train => self.train,
            Split::Dev => self.dev,
            Split::Eval => self.eval,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.sample_rate < 16_000 {
            return fail("sample rate must be at least 16 kHz");
        }
        let (d0, d1) = self.duration;
        if !(d0 > 0.0 && d0 <= d1) {
            return fail("duration range must be positive and ordered");
        }
        if self.speakers_per_split == 0 {
            return fail("need at least one speaker per split");
        }
        if !(self.snr_db.0 <= self.snr_db.1) || !(self.notch_gain.0 <= self.notch_gain.1) {
            return fail("SNR and notch gain ranges must be ordered");
        }
        if !(self.notch_gain.0 > 0.0 && self.notch_gain.1 < 1.0) {
            return fail("notch gain must lie in (0, 1)");
        }
        for r in [&self.seen, &self.unseen] {
            if r.period.0 < 2 || r.period.0 > r.period.1 || r.notch_lag.0 < 1 || r.notch_lag.0 > r.notch_lag.1 {
                return fail("artifact period and lag ranges must be positive and ordered");
            }
            if !(r.quant_step.0 > 0.0 && r.quant_step.0 <= r.quant_step.1) {
                return fail("quantization step range must be positive and ordered");
            }
        }
        if !disjoint(self.seen.period, self.unseen.period)
            || !disjoint(self.seen.notch_lag, self.unseen.notch_lag)
            || !disjoint(self.seen.quant_step, self.unseen.quant_step)
        {
            return fail("seen and unseen artifact ranges must not overlap");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        let pair = |a: &dyn ToString, b: &dyn ToString| format!("{},{}", a.to_string(), b.to_string());
        kv.set("seed", self.seed);
        kv.set("sample_rate", self.sample_rate);
        kv.set("duration", pair(&self.duration.0, &self.duration.1));
        kv.set("train", pair(&self.train.0, &self.train.1));
        kv.set("dev", pair(&self.dev.0, &self.dev.1));
        kv.set("eval", pair(&self.eval.0, &self.eval.1));
        kv.set("speakers_per_split", self.speakers_per_split);
        kv.set("snr_db", pair(&self.snr_db.0, &self.snr_db.1));
        kv.set("notch_gain", pair(&self.notch_gain.0, &self.notch_gain.1));
        for (name, r) in [("seen", &self.seen), ("unseen", &self.unseen)] {
            kv.set(&format!("{name}_period"), pair(&r.period.0, &r.period.1));
            kv.set(&format!("{name}_notch_lag"), pair(&r.notch_lag.0, &r.notch_lag.1));
            kv.set(&format!("{name}_quant_step"), pair(&r.quant_step.0, &r.quant_step.1));
        }
        kv
    }

    pub fn merge_kv(mut self, kv: &KvMap) -> Result<Self> {
        fn pair<T: std::str::FromStr>(kv: &KvMap, key: &str, slot: &mut (T, T)) -> Result<()> {
            let Some(v) = kv.get(key) else { return Ok(()) };
            let bad = || Error::Config(format!("`{key}` expects two comma-separated values, got {v:?}"));
            let (a, b) = v.split_once(',').ok_or_else(bad)?;
            *slot = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
            Ok(())
        }
        kv.update("seed", &mut self.seed)?;
        kv.update("sample_rate", &mut self.sample_rate)?;
        kv.update("speakers_per_split", &mut self.speakers_per_split)?;
        pair(kv, "duration", &mut self.duration)?;
        pair(kv, "train", &mut self.train)?;
        pair(kv, "dev", &mut self.dev)?;
        pair(kv, "eval", &mut self.eval)?;
        pair(kv, "snr_db", &mut self.snr_db)?;
        pair(kv, "notch_gain", &mut self.notch_gain)?;
        for (name, r) in [("seen", &mut self.seen), ("unseen", &mut self.unseen)] {
            pair(kv, &format!("{name}_period"), &mut r.period)?;
            pair(kv, &format!("{name}_notch_lag"), &mut r.notch_lag)?;
            pair(kv, &format!("{name}_quant_step"), &mut r.quant_step)?;
        }
        Ok(self)
    }
}

/// One spoofing attack: which artifacts it adds and its share of the period range.
#[derive(Clone, Debug, PartialEq)]
pub struct Attack {
    pub id: &'static str,
    pub notch: bool,
    pub quantize: bool,
    pub unseen: bool,
    /// Index of this attack's period sub-band and the number of sub-bands.
    pub band: (usize, usize),
}

const SEEN_FLAGS: [(&str, bool, bool); 6] = [
    ("A01", false, false),
    ("A02", true, false),
    ("A03", false, true),
    ("A04", true, true),
    ("A05", true, false),
    ("A06", false, true),
];

const UNSEEN_FLAGS: [(&str, bool, bool); 4] =
    [("A07", false, false), ("A08", true, false), ("A09", false, true), ("A10", true, true)];

/// Attacks used by `split`.
pub fn attacks(split: Split) -> Vec<Attack> {
    let (flags, unseen): (&[_], bool) = match split {
        Split::Train | Split::Dev => (&SEEN_FLAGS, false),
        Split::Eval => (&UNSEEN_FLAGS, true),
    };
    flags
        .iter()
        .enumerate()
        .map(|(i, &(id, notch, quantize))| Attack { id, notch, quantize, unseen, band: (i, flags.len()) })
        .collect()
}

/// Artifact parameters realized in one spoof utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Artifacts {
    pub period: usize,
    pub notch: Option<(usize, f64)>,
    pub quant_step: Option<f64>,
}

/// A planned utterance: its protocol entry and generator inputs.
#[derive(Clone, Debug)]
pub struct Planned {
    pub split: Split,
    pub trial: Trial,
    pub attack: Option<Attack>,
    speaker_f0: f64,
    stream: u64,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Every utterance of the corpus in protocol order: per split, bonafide
/// trials first, then spoof trials with attacks assigned round-robin.
pub fn plan(cfg: &SynthConfig) -> Result<Vec<Planned>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for split in Split::ALL {
        let speakers: Vec<f64> = (0..cfg.speakers_per_split)
            .map(|s| uniform(&mut rng_for(cfg.seed, (1 << 40) + split.index() * 4096 + s as u64), (90.0, 240.0)))
            .collect();
        let pool = attacks(split);
        let (nb, ns) = cfg.counts(split);
        for i in 0..nb + ns {
            let attack = (i >= nb).then(|| pool[(i - nb) % pool.len()].clone());
            let spk = i % cfg.speakers_per_split;
            let trial_id = format!("{}_{:05}", split.prefix(), i);
            let speaker_id = format!("{}SPK{:02}", split.prefix(), spk);
            let attack_id = attack.as_ref().map_or(BONAFIDE_KEY, |a| a.id);
            out.push(Planned {
                split,
                trial: Trial::new(&speaker_id, &trial_id, attack_id),
                attack,
                speaker_f0: speakers[spk],
                stream: (split.index() << 32) + i as u64,
            });
        }
    }
    Ok(out)
}

fn draw_artifacts(cfg: &SynthConfig, attack: &Attack, rng: &mut impl Rng) -> Artifacts {
    let r = if attack.unseen { &cfg.unseen } else { &cfg.seen };
    let (lo, hi) = r.period;
    let (band, bands) = attack.band;
    let width = (hi - lo) as f64 / bands as f64;
    let b_lo = lo + (band as f64 * width).round() as usize;
    let b_hi = (lo + ((band + 1) as f64 * width).round() as usize).clamp(b_lo, hi);
    let period = rng.random_range(b_lo..=b_hi);
    let notch = attack.notch.then(|| (rng.random_range(r.notch_lag.0..=r.notch_lag.1), uniform(rng, cfg.notch_gain)));
    let quant_step = attack.quantize.then(|| uniform(rng, r.quant_step));
    Artifacts { period, notch, quant_step }
}

/// Pink noise by the Kellett filter bank.
fn pink_noise(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut b = [0.0f64; 7];
    (0..n)
        .map(|_| {
            let w: f64 = StandardNormal.sample(rng);
            b[0] = 0.99886 * b[0] + w * 0.0555179;
            b[1] = 0.99332 * b[1] + w * 0.0750759;
            b[2] = 0.96900 * b[2] + w * 0.1538520;
            b[3] = 0.86650 * b[3] + w * 0.3104856;
            b[4] = 0.55000 * b[4] + w * 0.5329522;
            b[5] = -0.7616 * b[5] - w * 0.0168980;
            let out = b.iter().sum::<f64>() + w * 0.5362;
            b[6] = w * 0.115926;
            out
        })
        .collect()
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

/// Highest harmonic frequency of the clean stack.
pub const HARMONIC_CEILING_HZ: f64 = 4500.0;

/// Renders one utterance. Returns the waveform and, for spoofs, the realized
/// artifact parameters.
pub fn render(cfg: &SynthConfig, p: &Planned) -> (Waveform, Option<Artifacts>) {
    let mut rng = rng_for(cfg.seed, p.stream);
    let sr = cfg.sample_rate as f64;
    let dur = uniform(&mut rng, cfg.duration);
    let n = ((dur * sr).round() as usize).max(1);
    let artifacts = p.attack.as_ref().map(|a| draw_artifacts(cfg, a, &mut rng));

    let f0_base = p.speaker_f0 * uniform(&mut rng, (0.92, 1.08));
    let vib_rate = uniform(&mut rng, (4.0, 7.0));
    let vib_depth = uniform(&mut rng, (0.01, 0.03));
    let vib_phase = uniform(&mut rng, (0.0, 2.0 * PI));
    let drift = uniform(&mut rng, (-0.08, 0.08));
    let syl_rate = uniform(&mut rng, (2.0, 4.0));
    let syl_phase = uniform(&mut rng, (0.0, PI));
    let tilt = uniform(&mut rng, (0.8, 1.4));

    let quant = artifacts.as_ref().and_then(|a| a.quant_step);
    let f0_max = f0_base * (1.0 + vib_depth) * (1.0 + drift.abs()) * 2f64.powf(quant.unwrap_or(0.0) / 24.0);
    let harmonics = ((HARMONIC_CEILING_HZ / f0_max).floor() as usize).max(1);
    let amps: Vec<f64> = (1..=harmonics).map(|h| uniform(&mut rng, (0.5, 1.0)) / (h as f64).powf(tilt)).collect();
    let mut phases: Vec<f64> = (0..harmonics).map(|_| uniform(&mut rng, (0.0, 2.0 * PI))).collect();
    let jump_offset = artifacts.as_ref().map(|a| rng.random_range(0..a.period));

    let mut clean = vec![0.0; n];
    for (i, slot) in clean.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let mut f0 =
            f0_base * (1.0 + vib_depth * (2.0 * PI * vib_rate * t + vib_phase).sin()) * (1.0 + drift * t / dur);
        if let Some(q) = quant {
            let semis = 12.0 * (f0 / 55.0).log2();
            f0 = 55.0 * 2f64.powf((semis / q).round() * q / 12.0);
        }
        if let (Some(a), Some(off)) = (&artifacts, jump_offset) {
            if i >= off && (i - off) % a.period == 0 {
                for ph in phases.iter_mut() {
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    *ph += sign * uniform(&mut rng, (0.5 * PI, 1.5 * PI));
                }
            }
        }
        let mut s = 0.0;
        for (h, (ph, a)) in phases.iter_mut().zip(&amps).enumerate() {
            s += a * ph.sin();
            *ph = (*ph + 2.0 * PI * (h + 1) as f64 * f0 / sr) % (2.0 * PI);
        }
        let syl = 0.55 + 0.45 * (PI * syl_rate * t + syl_phase).sin().powi(2);
        *slot = s * syl;
    }
    if let Some((lag, g)) = artifacts.as_ref().and_then(|a| a.notch) {
        for i in (lag..n).rev() {
            clean[i] -= g * clean[i - lag];
        }
    }
    let fade = ((0.01 * sr) as usize).min(n / 2);
    for i in 0..fade {
        let w = 0.5 - 0.5 * (PI * i as f64 / fade as f64).cos();
        clean[i] *= w;
        clean[n - 1 - i] *= w;
    }
    let level = 0.1 / rms(&clean).max(1e-12);
    let noise = pink_noise(n, &mut rng);
    let snr = uniform(&mut rng, cfg.snr_db);
    let noise_level = 0.1 * 10f64.powf(-snr / 20.0) / rms(&noise).max(1e-12);
    let gain = uniform(&mut rng, (0.5, 1.5));
    let samples =
        clean.iter().zip(&noise).map(|(c, z)| (gain * (c * level + z * noise_level)).clamp(-1.0, 1.0)).collect();
    let w = Waveform::new(samples, cfg.sample_rate).expect("finite synthetic samples");
    (w, artifacts)
}

/// Files written by [`synth_corpus`].
#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub wav_dir: PathBuf,
    pub protocol_dir: PathBuf,
    pub wav_list: PathBuf,
    pub trials: Vec<(Split, Trial)>,
}

/// Writes `wav/<trial>.wav`, `protocols/{train,dev,eval}.txt` and
/// `wav_list.txt` (paths relative to `out`) under `out`.
pub fn synth_corpus(cfg: &SynthConfig, out: &Path) -> Result<SynthOutput> {
    let planned = plan(cfg)?;
    let wav_dir = out.join("wav");
    let protocol_dir = out.join("protocols");
    std::fs::create_dir_all(&wav_dir)?;
    std::fs::create_dir_all(&protocol_dir)?;
    planned
        .par_iter()
        .map(|p| render(cfg, p).0.write_wav(&wav_dir.join(&p.trial.audio)))
        .collect::<Result<Vec<()>>>()?;
    for split in Split::ALL {
        let trials: Vec<Trial> = planned.iter().filter(|p| p.split == split).map(|p| p.trial.clone()).collect();
        write_protocol(&protocol_dir.join(format!("{}.txt", split.name())), &trials)?;
    }
    let list: String = planned.iter().map(|p| format!("wav/{}\n", p.trial.audio.display())).collect();
    let wav_list = out.join("wav_list.txt");
    std::fs::write(&wav_list, list)?;
    Ok(SynthOutput {
        wav_dir,
        protocol_dir,
        wav_list,
        trials: planned.into_iter().map(|p| (p.split, p.trial)).collect(),
    })
}

/// Closed-form spoof detector: high-pass the waveform above the harmonic
/// band, square it, and take the largest normalized autocorrelation of that
/// envelope over lags in the artifact period range. A periodic click train
/// correlates strongly at its period; noise does not.
#[derive(Clone, Debug)]
pub struct ArtifactDetector {
    pub lags: (usize, usize),
    pub threshold: f64,
    taps: Vec<f64>,
}

impl ArtifactDetector {
    pub const DEFAULT_THRESHOLD: f64 = 0.2;

    pub fn new(sample_rate: u32, lags: (usize, usize), threshold: f64) -> Self {
        let n = 101usize;
        let fc = (HARMONIC_CEILING_HZ + 700.0) / sample_rate as f64;
        let mid = (n / 2) as f64;
        let taps = (0..n)
            .map(|i| {
                let x = i as f64 - mid;
                let sinc = if x == 0.0 { 2.0 * fc } else { (2.0 * PI * fc * x).sin() / (PI * x) };
                let t = 2.0 * PI * i as f64 / (n - 1) as f64;
                let blackman = 0.42 - 0.5 * t.cos() + 0.08 * (2.0 * t).cos();
                let hp = if i == n / 2 { 1.0 } else { 0.0 };
                hp - sinc * blackman
            })
            .collect();
        Self { lags, threshold, taps }
    }

    /// Detector tuned to the seen period range of `cfg`.
    pub fn for_config(cfg: &SynthConfig) -> Self {
        Self::new(cfg.sample_rate, cfg.seen.period, Self::DEFAULT_THRESHOLD)
    }

    pub fn score(&self, w: &Waveform) -> f64 {
        let x = &w.samples;
        let k = self.taps.len();
        if x.len() < k + self.lags.1 + 1 {
            return 0.0;
        }
        let mut env: Vec<f64> = (0..=x.len() - k)
            .map(|i| {
                let y: f64 = self.taps.iter().zip(&x[i..i + k]).map(|(a, b)| a * b).sum();
                y * y
            })
            .collect();
        let mean = env.iter().sum::<f64>() / env.len() as f64;
        env.iter_mut().for_each(|e| *e -= mean);
        let energy: f64 = env.iter().map(|e| e * e).sum();
        if energy <= 0.0 {
            return 0.0;
        }
        (self.lags.0..=self.lags.1.min(env.len() - 1))
            .map(|lag| env.iter().zip(&env[lag..]).map(|(a, b)| a * b).sum::<f64>() / energy)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_spoof(&self, w: &Waveform) -> bool {
        self.score(w) > self.threshold
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::protocol::parse_protocol;
    use crate::metrics::Label;

    fn small() -> SynthConfig {
        SynthConfig { train: (10, 10), dev: (2, 2), eval: (3, 5), ..SynthConfig::default() }
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let cfg = SynthConfig { train: (2, 3), dev: (1, 1), eval: (1, 2), ..SynthConfig::default() };
        let out = synth_corpus(&cfg, a.path()).unwrap();
        synth_corpus(&cfg, b.path()).unwrap();
        for (_, t) in &out.trials {
            let rel = Path::new("wav").join(&t.audio);
            assert_eq!(std::fs::read(a.path().join(&rel)).unwrap(), std::fs::read(b.path().join(&rel)).unwrap());
        }
        for f in ["protocols/train.txt", "protocols/dev.txt", "protocols/eval.txt", "wav_list.txt"] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        }
        let other = synth_corpus(&SynthConfig { seed: 1, ..cfg }, b.path()).unwrap();
        let rel = Path::new("wav").join(&other.trials[0].1.audio);
        assert_ne!(std::fs::read(a.path().join(&rel)).unwrap(), std::fs::read(b.path().join(&rel)).unwrap());
    }

    #[test]
    fn protocol_counts_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let out = synth_corpus(&small(), dir.path()).unwrap();
        let train = parse_protocol(&out.protocol_dir.join("train.txt")).unwrap();
        assert_eq!(train.len(), 20);
        assert_eq!(train.iter().filter(|t| t.label == Label::Bonafide).count(), 10);
        let eval = parse_protocol(&out.protocol_dir.join("eval.txt")).unwrap();
        assert!(eval.iter().filter(|t| t.label == Label::Spoof).all(|t| t.attack_id.as_str() >= "A07"));
        assert!(train.iter().filter(|t| t.label == Label::Spoof).all(|t| t.attack_id.as_str() <= "A06"));
        let list = std::fs::read_to_string(&out.wav_list).unwrap();
        assert_eq!(list.lines().count(), 20 + 4 + 8);
        let w = Waveform::read_wav(&dir.path().join(list.lines().next().unwrap())).unwrap();
        assert_eq!((w.samples.len(), w.sample_rate), (16_000, 16_000));
    }

    #[test]
    fn seen_and_unseen_parameters_never_meet() {
        let cfg = SynthConfig { train: (0, 60), dev: (0, 0), eval: (0, 60), ..SynthConfig::default() };
        let mut seen = Vec::new();
        let mut unseen = Vec::new();
        for p in plan(&cfg).unwrap() {
            let a = draw_artifacts(&cfg, p.attack.as_ref().unwrap(), &mut rng_for(3, p.stream));
            if p.split == Split::Eval {
                unseen.push(a)
            } else {
                seen.push(a)
            }
        }
        let within = |v: f64, (lo, hi): (f64, f64)| lo <= v && v <= hi;
        let as_f = |(a, b): (usize, usize)| (a as f64, b as f64);
        for (set, r) in [(&seen, &cfg.seen), (&unseen, &cfg.unseen)] {
            for a in set.iter() {
                assert!(within(a.period as f64, as_f(r.period)));
                if let Some((lag, _)) = a.notch {
                    assert!(within(lag as f64, as_f(r.notch_lag)));
                }
                if let Some(q) = a.quant_step {
                    assert!(within(q, r.quant_step));
                }
            }
        }
        assert!(seen.iter().all(|s| unseen.iter().all(|u| s.period != u.period)));
        let bad = SynthConfig {
            unseen: ArtifactRanges { period: (300, 500), ..SynthConfig::default().unseen },
            ..SynthConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn kv_round_trip() {
        let cfg = SynthConfig { seed: 9, train: (3, 4), snr_db: (15.0, 25.5), ..SynthConfig::default() };
        assert_eq!(SynthConfig::default().merge_kv(&cfg.to_kv()).unwrap(), cfg);
    }

    #[test]
    fn clean_stack_stays_below_ceiling() {
        let cfg = small();
        let planned = plan(&cfg).unwrap();
        let p = planned.iter().find(|p| p.attack.is_none()).unwrap();
        let (w, art) = render(&cfg, p);
        assert!(art.is_none());
        assert!(w.samples.iter().all(|s| s.abs() <= 1.0));
        let det = ArtifactDetector::for_config(&cfg);
        assert!(det.score(&w) < det.threshold);
    }

    #[test]
    fn detector_separates_train_split() {
        let cfg = SynthConfig { train: (60, 60), dev: (0, 0), eval: (0, 0), seed: 11, ..SynthConfig::default() };
        let det = ArtifactDetector::for_config(&cfg);
        let planned = plan(&cfg).unwrap();
        let correct = planned.par_iter().filter(|p| det.is_spoof(&render(&cfg, p).0) == p.attack.is_some()).count();
        let acc = correct as f64 / planned.len() as f64;
        assert!(acc >= 0.95, "accuracy {acc}");
    }
}
