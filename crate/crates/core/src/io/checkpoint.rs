use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Dataset;
use crate::error::{DiveError, Result};
use crate::model::{ModelState, MrfPrior, SubjectStage};
use crate::sigmoid::TrajectoryParams;

pub const FORMAT_VERSION: u64 = 1;

/// Identifies the dataset a model was fitted to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub rows: usize,
    pub vertices: usize,
    pub sha256: String,
}

impl Fingerprint {
    pub fn of(data: &Dataset) -> Self {
        let mut h = Sha256::new();
        h.update((data.n_rows() as u64).to_le_bytes());
        h.update((data.n_vertices() as u64).to_le_bytes());
        for v in data.values().iter() {
            h.update(v.to_le_bytes());
        }
        for o in data.rows() {
            h.update(o.subject.to_le_bytes());
            h.update(o.visit.to_le_bytes());
            h.update(o.age.to_le_bytes());
        }
        for (a, b) in data.adjacency().edges() {
            h.update((a as u64).to_le_bytes());
            h.update((b as u64).to_le_bytes());
        }
        let sha256 = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        Self {
            rows: data.n_rows(),
            vertices: data.n_vertices(),
            sha256,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub model: ModelState,
    pub fingerprint: Fingerprint,
    /// Fit mode name (`full`, `roi`, `no_staging`).
    pub mode: String,
}

impl ModelCheckpoint {
    pub fn new(model: ModelState, data: &Dataset, mode: &str) -> Self {
        Self {
            model,
            fingerprint: Fingerprint::of(data),
            mode: mode.to_string(),
        }
    }

    pub fn verify(&self, data: &Dataset) -> Result<()> {
        let found = Fingerprint::of(data);
        if found != self.fingerprint {
            return Err(DiveError::FingerprintMismatch(format!(
                "checkpoint was fitted to {} rows x {} vertices ({}), dataset is {} x {} ({})",
                self.fingerprint.rows,
                self.fingerprint.vertices,
                self.fingerprint.sha256,
                found.rows,
                found.vertices,
                found.sha256
            )));
        }
        Ok(())
    }
}

/// Floats are stored as the hex of their IEEE bits alongside a decimal
/// rendering for reading; only the bits are used when loading.
#[derive(Debug, Serialize, Deserialize)]
struct Exact {
    bits: String,
    value: f64,
}

fn enc(v: f64) -> Exact {
    Exact {
        bits: format!("{:016x}", v.to_bits()),
        value: if v.is_finite() { v } else { 0.0 },
    }
}

fn dec(e: &Exact) -> Result<f64> {
    if e.bits.len() != 16 {
        return Err(DiveError::CorruptPayload(format!("bad float bits {:?}", e.bits)));
    }
    u64::from_str_radix(&e.bits, 16)
        .map(f64::from_bits)
        .map_err(|_| DiveError::CorruptPayload(format!("bad float bits {:?}", e.bits)))
}

fn dec_all(v: &[Exact]) -> Result<Vec<f64>> {
    v.iter().map(dec).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct WireTrajectory {
    a: Exact,
    b: Exact,
    c: Exact,
    d: Exact,
}

#[derive(Debug, Serialize, Deserialize)]
struct WireStage {
    alpha: Exact,
    beta: Exact,
}

#[derive(Debug, Serialize, Deserialize)]
struct Wire {
    format_version: u64,
    fingerprint: Fingerprint,
    mode: String,
    k: usize,
    vertices: usize,
    lambda: Exact,
    sigmas: Vec<Exact>,
    trajectories: Vec<WireTrajectory>,
    stages: Vec<WireStage>,
    /// Row-major `vertices × k`.
    posteriors: Vec<Exact>,
}

pub fn checkpoint_to_string(cp: &ModelCheckpoint) -> String {
    let m = &cp.model;
    let wire = Wire {
        format_version: FORMAT_VERSION,
        fingerprint: cp.fingerprint.clone(),
        mode: cp.mode.clone(),
        k: m.k(),
        vertices: m.n_vertices(),
        lambda: enc(m.mrf.lambda),
        sigmas: m.sigmas.iter().map(|&s| enc(s)).collect(),
        trajectories: m
            .trajectories
            .iter()
            .map(|t| WireTrajectory {
                a: enc(t.a),
                b: enc(t.b),
                c: enc(t.c),
                d: enc(t.d),
            })
            .collect(),
        stages: m
            .stages
            .iter()
            .map(|s| WireStage {
                alpha: enc(s.alpha),
                beta: enc(s.beta),
            })
            .collect(),
        posteriors: m.posteriors.iter().map(|&z| enc(z)).collect(),
    };
    let mut text = serde_json::to_string_pretty(&wire).expect("checkpoint serializes");
    text.push('\n');
    text
}

pub fn checkpoint_from_str(text: &str) -> Result<ModelCheckpoint> {
    let json: serde_json::Value =
        serde_json::from_str(text).map_err(|e| DiveError::CorruptPayload(e.to_string()))?;
    let version = json
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| DiveError::CorruptPayload("missing format_version".into()))?;
    if version != FORMAT_VERSION {
        return Err(DiveError::UnsupportedVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let wire: Wire =
        serde_json::from_value(json).map_err(|e| DiveError::CorruptPayload(e.to_string()))?;

    let trajectories = wire
        .trajectories
        .iter()
        .map(|t| {
            Ok(TrajectoryParams {
                a: dec(&t.a)?,
                b: dec(&t.b)?,
                c: dec(&t.c)?,
                d: dec(&t.d)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let stages = wire
        .stages
        .iter()
        .map(|s| {
            Ok(SubjectStage {
                alpha: dec(&s.alpha)?,
                beta: dec(&s.beta)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let z = dec_all(&wire.posteriors)?;
    if z.len() != wire.vertices * wire.k || trajectories.len() != wire.k {
        return Err(DiveError::CorruptPayload(format!(
            "expected {} clusters over {} vertices",
            wire.k, wire.vertices
        )));
    }
    let posteriors = Array2::from_shape_vec((wire.vertices, wire.k), z).expect("length checked");
    let model = ModelState {
        trajectories,
        sigmas: dec_all(&wire.sigmas)?,
        stages,
        mrf: MrfPrior {
            lambda: dec(&wire.lambda)?,
        },
        posteriors,
    };
    model
        .validate()
        .map_err(|e| DiveError::CorruptPayload(e.to_string()))?;
    Ok(ModelCheckpoint {
        model,
        fingerprint: wire.fingerprint,
        mode: wire.mode,
    })
}

pub fn save_model(path: &Path, cp: &ModelCheckpoint) -> Result<()> {
    fs::write(path, checkpoint_to_string(cp)).map_err(|e| DiveError::io(path, e))
}

pub fn load_model(path: &Path) -> Result<ModelCheckpoint> {
    let text = fs::read_to_string(path).map_err(|e| DiveError::io(path, e))?;
    checkpoint_from_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gem::{gem_fit, FitMode};
    use crate::mstep::FitConfig;
    use crate::priors::Priors;
    use crate::synthetic::{generate_dataset, ScenarioConfig, Topology};

    fn fitted() -> (Dataset, ModelCheckpoint) {
        let cfg = ScenarioConfig {
            vertices: 49,
            subjects: 8,
            topology: Topology::Grid { width: 7 },
            ..ScenarioConfig::default()
        };
        let (data, _) = generate_dataset(&cfg).unwrap();
        let fit = FitConfig {
            max_outer_iters: 4,
            ..FitConfig::default()
        };
        let (model, _) = gem_fit(&data, &fit, &Priors::uniform(), &FitMode::Full).unwrap();
        let cp = ModelCheckpoint::new(model, &data, "full");
        (data, cp)
    }

    fn bits(m: &ModelState) -> Vec<u64> {
        let mut out: Vec<u64> = m
            .trajectories
            .iter()
            .flat_map(|t| [t.a, t.b, t.c, t.d])
            .chain(m.sigmas.iter().copied())
            .chain(m.stages.iter().flat_map(|s| [s.alpha, s.beta]))
            .chain(m.posteriors.iter().copied())
            .map(f64::to_bits)
            .collect();
        out.push(m.mrf.lambda.to_bits());
        out
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (data, cp) = fitted();
        let back = checkpoint_from_str(&checkpoint_to_string(&cp)).unwrap();
        assert_eq!(bits(&back.model), bits(&cp.model));
        assert_eq!(back.fingerprint, cp.fingerprint);
        back.verify(&data).unwrap();
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let (_, cp) = fitted();
        let text = checkpoint_to_string(&cp);
        for cut in [10, text.len() / 2, text.len() - 3] {
            assert!(matches!(
                checkpoint_from_str(&text[..cut]),
                Err(DiveError::CorruptPayload(_))
            ));
        }
    }

    #[test]
    fn version_bump_is_rejected() {
        let (_, cp) = fitted();
        let text = checkpoint_to_string(&cp).replace("\"format_version\": 1", "\"format_version\": 2");
        assert!(matches!(
            checkpoint_from_str(&text),
            Err(DiveError::UnsupportedVersion { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn fingerprint_detects_other_data() {
        let (data, cp) = fitted();
        let mut values = data.values().clone();
        values[[0, 0]] += 1e-12;
        let other = data.with_values(values).unwrap();
        assert!(matches!(cp.verify(&other), Err(DiveError::FingerprintMismatch(_))));
    }
}
