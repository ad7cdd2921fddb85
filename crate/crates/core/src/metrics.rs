//! Detection metrics over countermeasure scores: equal error rate, normalized
//! minimum tandem detection cost, and per-attack accuracy.
//!
//! Higher scores mean more bonafide-like. At threshold `θ` a trial is accepted
//! as bonafide when `score >= θ`, so the false-acceptance rate is the fraction
//! of spoof trials with `score >= θ` and the false-rejection (miss) rate the
//! fraction of bonafide trials with `score < θ`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::config::KvMap;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Bonafide,
    Spoof,
}

impl Label {
    pub fn name(self) -> &'static str {
        match self {
            Label::Bonafide => "bonafide",
            Label::Spoof => "spoof",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bonafide" => Ok(Label::Bonafide),
            "spoof" => Ok(Label::Spoof),
            other => Err(Error::Config(format!("unknown label `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRecord {
    pub trial_id: String,
    pub label: Label,
    pub score: f64,
}

impl ScoreRecord {
    pub fn new(trial_id: impl Into<String>, label: Label, score: f64) -> Self {
        Self { trial_id: trial_id.into(), label, score }
    }
}

/// One operating point of the threshold sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    /// Spoof accepted.
    pub far: f64,
    /// Bonafide rejected.
    pub frr: f64,
}

fn split(records: &[ScoreRecord]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut bona = Vec::new();
    let mut spoof = Vec::new();
    for r in records {
        if !r.score.is_finite() {
            return Err(Error::Config(format!("non-finite score for trial {}", r.trial_id)));
        }
        match r.label {
            Label::Bonafide => bona.push(r.score),
            Label::Spoof => spoof.push(r.score),
        }
    }
    if bona.is_empty() || spoof.is_empty() {
        return Err(Error::SingleClass);
    }
    bona.sort_by(f64::total_cmp);
    spoof.sort_by(f64::total_cmp);
    Ok((bona, spoof))
}

/// Every distinct operating point, by increasing threshold: the smallest
/// score (accept everything), the midpoint between each pair of adjacent
/// distinct scores, and `+inf` (reject everything).
pub fn operating_points(records: &[ScoreRecord]) -> Result<Vec<OperatingPoint>> {
    let (bona, spoof) = split(records)?;
    let mut all: Vec<f64> = bona.iter().chain(&spoof).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let mut thresholds = Vec::with_capacity(all.len() + 1);
    thresholds.push(all[0]);
    thresholds.extend(all.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    thresholds.push(f64::INFINITY);
    let (nb, ns) = (bona.len() as f64, spoof.len() as f64);
    // Both score lists are sorted, so the counts below each threshold advance monotonically.
    let (mut ib, mut is) = (0usize, 0usize);
    Ok(thresholds
        .into_iter()
        .map(|theta| {
            while ib < bona.len() && bona[ib] < theta {
                ib += 1;
            }
            while is < spoof.len() && spoof[is] < theta {
                is += 1;
            }
            OperatingPoint { threshold: theta, far: (spoof.len() - is) as f64 / ns, frr: ib as f64 / nb }
        })
        .collect())
}

/// Equal error rate and its threshold.
///
/// The sweep finds the first operating point `j` with `FAR <= FRR`. If they
/// are equal there, that point is the answer; otherwise both rates are
/// interpolated linearly between points `j-1` and `j` to where
/// `FAR - FRR` crosses zero. The threshold is interpolated the same way
/// (or taken from point `j-1` when point `j` is the reject-all point).
pub fn eer(records: &[ScoreRecord]) -> Result<(f64, f64)> {
    let pts = operating_points(records)?;
    let j = pts.iter().position(|p| p.far - p.frr <= 0.0).expect("reject-all point has FAR 0, FRR 1");
    let cur = pts[j];
    let d1 = cur.far - cur.frr;
    if d1 == 0.0 || j == 0 {
        return Ok((cur.far, cur.threshold));
    }
    let prev = pts[j - 1];
    let d0 = prev.far - prev.frr;
    let t = d0 / (d0 - d1);
    let rate = prev.far + t * (cur.far - prev.far);
    let threshold =
        if cur.threshold.is_finite() { prev.threshold + t * (cur.threshold - prev.threshold) } else { prev.threshold };
    Ok((rate, threshold))
}

/// Costs, priors and fixed ASV error rates of the tandem detection cost.
#[derive(Clone, Debug, PartialEq)]
pub struct TdcfParams {
    pub p_target: f64,
    pub p_nontarget: f64,
    pub p_spoof: f64,
    pub c_miss_asv: f64,
    pub c_fa_asv: f64,
    pub c_miss_cm: f64,
    pub c_fa_cm: f64,
    /// ASV miss rate on target trials.
    pub p_miss_asv: f64,
    /// ASV false-alarm rate on nontarget trials.
    pub p_fa_asv: f64,
    /// ASV miss rate on spoof trials (`1 - ` its spoof false-accept rate).
    pub p_miss_spoof_asv: f64,
}

const TDCF_KEYS: [&str; 10] = [
    "p_target",
    "p_nontarget",
    "p_spoof",
    "c_miss_asv",
    "c_fa_asv",
    "c_miss_cm",
    "c_fa_cm",
    "p_miss_asv",
    "p_fa_asv",
    "p_miss_spoof_asv",
];

impl TdcfParams {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let priors = [self.p_target, self.p_nontarget, self.p_spoof];
        if priors.iter().any(|&p| !(p > 0.0)) || (priors.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return fail(format!("priors must be positive and sum to 1, got {priors:?}"));
        }
        let costs = [self.c_miss_asv, self.c_fa_asv, self.c_miss_cm, self.c_fa_cm];
        if costs.iter().any(|&c| !(c > 0.0) || !c.is_finite()) {
            return fail(format!("costs must be positive, got {costs:?}"));
        }
        let rates = [self.p_miss_asv, self.p_fa_asv, self.p_miss_spoof_asv];
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return fail(format!("ASV error rates must lie in [0, 1], got {rates:?}"));
        }
        Ok(())
    }

    /// `(C1, C2)`: weights of the CM miss and false-alarm rates.
    pub fn weights(&self) -> (f64, f64) {
        let c1 = self.p_target * (self.c_miss_cm - self.c_miss_asv * self.p_miss_asv)
            - self.p_nontarget * self.c_fa_asv * self.p_fa_asv;
        let c2 = self.c_fa_cm * self.p_spoof * (1.0 - self.p_miss_spoof_asv);
        (c1, c2)
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let mut v = [0.0; 10];
        for (slot, key) in v.iter_mut().zip(TDCF_KEYS) {
            *slot = kv.parse_value(key)?.ok_or_else(|| Error::Config(format!("t-DCF parameter `{key}` missing")))?;
        }
        let p = Self {
            p_target: v[0],
            p_nontarget: v[1],
            p_spoof: v[2],
            c_miss_asv: v[3],
            c_fa_asv: v[4],
            c_miss_cm: v[5],
            c_fa_cm: v[6],
            p_miss_asv: v[7],
            p_fa_asv: v[8],
            p_miss_spoof_asv: v[9],
        };
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&KvMap::load(path)?)
    }
}

/// Minimum over CM thresholds of `(C1 * P_miss_cm + C2 * P_fa_cm) / min(C1, C2)`.
///
/// `min(C1, C2)` is the cost of the better of the two trivial CMs (accept
/// all, reject all), so the result lies in `[0, 1]`.
pub fn min_tdcf(records: &[ScoreRecord], p: &TdcfParams) -> Result<f64> {
    p.validate()?;
    let (c1, c2) = p.weights();
    if !(c1 > 0.0) || !(c2 > 0.0) {
        return Err(Error::DegenerateCost(format!("C1 = {c1}, C2 = {c2}; both must be positive")));
    }
    let norm = c1.min(c2);
    Ok(operating_points(records)?.iter().map(|pt| (c1 * pt.frr + c2 * pt.far) / norm).fold(f64::INFINITY, f64::min))
}

/// Accuracy at a fixed threshold: bonafide trials accepted, and spoof trials
/// rejected per attack.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackAccuracy {
    pub bonafide: f64,
    pub per_attack: BTreeMap<String, f64>,
}

/// Attack key used for bonafide trials in protocol maps.
pub const BONAFIDE_KEY: &str = "-";

/// `attacks` maps every trial id to its attack key ([`BONAFIDE_KEY`] for
/// bonafide). Attack groups with no scored spoof trials are omitted with a
/// warning.
pub fn accuracy_at_eer(
    records: &[ScoreRecord],
    threshold: f64,
    attacks: &BTreeMap<String, String>,
) -> Result<AttackAccuracy> {
    let mut hits: BTreeMap<&str, (usize, usize)> =
        attacks.values().filter(|a| a.as_str() != BONAFIDE_KEY).map(|a| (a.as_str(), (0, 0))).collect();
    let (mut bona_ok, mut bona_n) = (0usize, 0usize);
    for r in records {
        let attack = attacks.get(&r.trial_id).ok_or_else(|| Error::UnknownTrial(r.trial_id.clone()))?;
        match r.label {
            Label::Bonafide => {
                bona_n += 1;
                bona_ok += usize::from(r.score >= threshold);
            }
            Label::Spoof => {
                let slot = hits
                    .get_mut(attack.as_str())
                    .ok_or_else(|| Error::Config(format!("trial {} is spoof but mapped to bonafide", r.trial_id)))?;
                slot.1 += 1;
                slot.0 += usize::from(r.score < threshold);
            }
        }
    }
    let mut per_attack = BTreeMap::new();
    for (attack, (ok, n)) in hits {
        if n == 0 {
            log::warn!("attack {attack} has no scored trials; omitted");
            continue;
        }
        per_attack.insert(attack.to_string(), ok as f64 / n as f64);
    }
    let bonafide = if bona_n == 0 { f64::NAN } else { bona_ok as f64 / bona_n as f64 };
    Ok(AttackAccuracy { bonafide, per_attack })
}

/// Parses `trial_id label score` lines; `#` starts a comment line.
pub fn parse_scores(text: &str, origin: &str) -> Result<Vec<ScoreRecord>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse { path: origin.into(), line: n + 1, msg };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [id, label, score] = fields[..] else {
            return Err(err(format!("expected `trial_id label score`, got {line:?}")));
        };
        let label = label.parse().map_err(|e: Error| err(e.to_string()))?;
        let score: f64 = score.parse().map_err(|_| err(format!("bad score {score:?}")))?;
        if !score.is_finite() {
            return Err(err(format!("non-finite score {score}")));
        }
        out.push(ScoreRecord::new(id, label, score));
    }
    Ok(out)
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    parse_scores(&std::fs::read_to_string(path)?, &path.display().to_string())
}

/// Shortest round-trip formatting, so the text is a pure function of the values.
pub fn format_scores(records: &[ScoreRecord]) -> String {
    records.iter().map(|r| format!("{} {} {}\n", r.trial_id, r.label, r.score)).collect()
}

pub fn write_scores(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    std::fs::write(path, format_scores(records))?;
    Ok(())
}

/// Summary of one score file.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub eer: f64,
    pub threshold: f64,
    pub min_tdcf: Option<f64>,
    pub accuracy: Option<AttackAccuracy>,
}

impl MetricsReport {
    pub fn compute(
        records: &[ScoreRecord],
        tdcf: Option<&TdcfParams>,
        attacks: Option<&BTreeMap<String, String>>,
    ) -> Result<Self> {
        let (eer, threshold) = eer(records)?;
        let min_tdcf = tdcf.map(|p| min_tdcf(records, p)).transpose()?;
        let accuracy = attacks.map(|a| accuracy_at_eer(records, threshold, a)).transpose()?;
        Ok(Self { eer, threshold, min_tdcf, accuracy })
    }

    /// `metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        out.push_str(&format!("eer,{}\nthreshold,{}\n", self.eer, self.threshold));
        if let Some(t) = self.min_tdcf {
            out.push_str(&format!("min_tdcf,{t}\n"));
        }
        if let Some(acc) = &self.accuracy {
            out.push_str(&format!("accuracy_bonafide,{}\n", acc.bonafide));
            for (attack, v) in &acc.per_attack {
                out.push_str(&format!("accuracy_{attack},{v}\n"));
            }
        }
        out
    }
}
