//! Measurement streams: synthetic generation, CSV round trips and attack injection.

use crate::HarnessError;
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use zkstar_core::model::{parse_training_csv, StateSpaceModel};
use zkstar_core::wire::Sample;

fn default_model() -> String {
    zkstar_prover::BUILTIN_REFERENCE.into()
}

/// `--synthetic` source description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    #[serde(default = "default_model")]
    pub model_file: String,
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn generate(&self) -> Result<Vec<Sample>, HarnessError> {
        let config = zkstar_core::wire::SessionConfig::new(&self.model_file, 1, 1, 8);
        let model = zkstar_prover::load_model(&config)?;
        synthetic_stream(&model, self.steps, self.seed)
    }
}

/// Simulate `steps` samples of `model` from the origin with timestamps `0..steps`.
pub fn synthetic_stream(model: &StateSpaceModel, steps: usize, seed: u64) -> Result<Vec<Sample>, HarnessError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let data = model
        .simulate(&DVector::zeros(model.state_dim()), None, steps, &mut rng)
        .map_err(|e| HarnessError::Model(e.to_string()))?;
    Ok(data.into_iter().enumerate().map(|(t, (_, y))| Sample { t: t as u64, y: y.iter().copied().collect(), u: None }).collect())
}

/// Parse `t, y_0..y_{d-1}[, u_0..u_{k-1}]` rows. Errors name the offending row.
pub fn read_csv(text: &str, actuators: usize) -> Result<Vec<Sample>, HarnessError> {
    let rows = parse_training_csv(text, actuators).map_err(|e| HarnessError::Csv(e.to_string()))?;
    rows.into_iter()
        .enumerate()
        .map(|(i, r)| {
            let t = u64::try_from(r.t).map_err(|_| HarnessError::Csv(format!("csv row {}: negative timestamp", i + 2)))?;
            Ok(Sample { t, y: r.y.iter().copied().collect(), u: r.u.map(|u| u.iter().copied().collect()) })
        })
        .collect()
}

pub fn write_csv(samples: &[Sample]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    if let Some(first) = samples.first() {
        let mut header = vec!["t".to_string()];
        header.extend((0..first.y.len()).map(|i| format!("y{i}")));
        header.extend((0..first.u.as_ref().map_or(0, Vec::len)).map(|i| format!("u{i}")));
        w.write_record(&header).expect("in-memory csv");
    }
    for s in samples {
        let mut rec = vec![s.t.to_string()];
        rec.extend(s.y.iter().map(|v| format!("{v:?}")));
        rec.extend(s.u.iter().flatten().map(|v| format!("{v:?}")));
        w.write_record(&rec).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Bias,
    Drift,
    Replay,
}

/// Attack over timestamps `[start_t, end_t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub start_t: u64,
    pub end_t: u64,
    pub kind: AttackKind,
    /// Per-sensor offset (bias) or final ramp height (drift). Missing entries are zero.
    #[serde(default)]
    pub magnitude: Vec<f64>,
    /// First timestamp of the replayed clean segment; defaults to the segment just before the attack.
    #[serde(default)]
    pub source_start: Option<u64>,
}

impl AttackSpec {
    pub fn contains(&self, t: u64) -> bool {
        (self.start_t..self.end_t).contains(&t)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.start_t >= self.end_t {
            return Err(HarnessError::Attack(format!("start_t {} must precede end_t {}", self.start_t, self.end_t)));
        }
        if self.magnitude.iter().any(|m| !m.is_finite()) {
            return Err(HarnessError::Attack("magnitudes must be finite".into()));
        }
        Ok(())
    }
}

pub fn inject_attack(stream: &[Sample], spec: &AttackSpec) -> Result<Vec<Sample>, HarnessError> {
    spec.validate()?;
    let (Some(first), Some(last)) = (stream.first(), stream.last()) else {
        return Err(HarnessError::Attack("empty stream".into()));
    };
    if spec.start_t < first.t || spec.end_t > last.t + 1 {
        return Err(HarnessError::Attack(format!("range [{}, {}) outside stream [{}, {}]", spec.start_t, spec.end_t, first.t, last.t)));
    }
    let d = first.y.len();
    if spec.magnitude.len() > d {
        return Err(HarnessError::Attack(format!("{} magnitudes for {d} sensors", spec.magnitude.len())));
    }
    let len = spec.end_t - spec.start_t;
    let source = match spec.kind {
        AttackKind::Replay => {
            let src = match spec.source_start {
                Some(s) => s,
                None => spec.start_t.checked_sub(len).filter(|s| *s >= first.t).ok_or_else(|| {
                    HarnessError::Attack("no clean segment precedes the attack; set source_start".into())
                })?,
            };
            if src < first.t || src + len > last.t + 1 {
                return Err(HarnessError::Attack("replay source segment outside stream".into()));
            }
            Some(src)
        }
        _ => None,
    };
    let at = |t: u64| (t - first.t) as usize;
    let mut out = stream.to_vec();
    for s in out.iter_mut().filter(|s| spec.contains(s.t)) {
        let k = s.t - spec.start_t;
        match spec.kind {
            AttackKind::Bias => s.y.iter_mut().zip(&spec.magnitude).for_each(|(y, m)| *y += m),
            AttackKind::Drift => {
                let frac = k as f64 / len as f64;
                s.y.iter_mut().zip(&spec.magnitude).for_each(|(y, m)| *y += m * frac);
            }
            AttackKind::Replay => s.y = stream[at(source.expect("replay source") + k % len)].y.clone(),
        }
    }
    Ok(out)
}
