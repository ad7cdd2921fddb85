//! CM protocol files: one trial per line,
//! `speaker_id trial_id - attack_id key`, where `attack_id` is `-` exactly
//! when `key` is `bonafide`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::{Label, BONAFIDE_KEY};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trial {
    pub trial_id: String,
    pub speaker_id: String,
    pub attack_id: String,
    pub label: Label,
    /// `<trial_id>.wav`, relative to the audio directory.
    pub audio: PathBuf,
}

impl Trial {
    pub fn new(speaker_id: &str, trial_id: &str, attack_id: &str) -> Self {
        let label = if attack_id == BONAFIDE_KEY { Label::Bonafide } else { Label::Spoof };
        Self {
            trial_id: trial_id.to_string(),
            speaker_id: speaker_id.to_string(),
            attack_id: attack_id.to_string(),
            label,
            audio: PathBuf::from(format!("{trial_id}.wav")),
        }
    }

    pub fn line(&self) -> String {
        format!("{} {} - {} {}", self.speaker_id, self.trial_id, self.attack_id, self.label)
    }
}

pub fn parse_protocol_str(text: &str, origin: &str) -> Result<Vec<Trial>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { path: origin.into(), line: n + 1, msg };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [speaker, trial, _, attack, key] = fields[..] else {
            return Err(err(format!("expected 5 fields `speaker trial - attack key`, found {}", fields.len())));
        };
        let label: Label = key.parse().map_err(|e: Error| err(e.to_string()))?;
        if (attack == BONAFIDE_KEY) != (label == Label::Bonafide) {
            return Err(err(format!("attack `{attack}` inconsistent with key `{key}`")));
        }
        out.push(Trial::new(speaker, trial, attack));
    }
    Ok(out)
}

pub fn parse_protocol(path: &Path) -> Result<Vec<Trial>> {
    parse_protocol_str(&std::fs::read_to_string(path)?, &path.display().to_string())
}

pub fn format_protocol(trials: &[Trial]) -> String {
    trials.iter().map(|t| t.line() + "\n").collect()
}

pub fn write_protocol(path: &Path, trials: &[Trial]) -> Result<()> {
    std::fs::write(path, format_protocol(trials))?;
    Ok(())
}

/// Trial id to attack id, the grouping used for per-attack accuracy.
pub fn attack_map(trials: &[Trial]) -> BTreeMap<String, String> {
    trials.iter().map(|t| (t.trial_id.clone(), t.attack_id.clone())).collect()
}
