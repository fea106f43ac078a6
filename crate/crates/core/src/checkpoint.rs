//! JSON checkpoints for energy and generator networks.
//!
//! Parameters and optimizer moments are stored as decimal strings with 17 significant
//! digits, which round-trip every `f64` exactly. Serialization is deterministic: the same
//! model and metadata always produce the same bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dde::{DdeModel, DdeOptState};
use crate::error::{Error, Result};
use crate::generator::GeneratorModel;
use crate::network::{MlpConfig, MlpParams};
use crate::optim::Adam;

pub const FORMAT: &str = "dde-checkpoint/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Dde,
    Generator,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Dde => "dde",
            ModelKind::Generator => "generator",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamRecord {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    #[serde(with = "decimal_vec")]
    pub m: Vec<f64>,
    #[serde(with = "decimal_vec")]
    pub v: Vec<f64>,
}

impl From<&Adam> for AdamRecord {
    fn from(a: &Adam) -> Self {
        AdamRecord { beta1: a.beta1, beta2: a.beta2, eps: a.eps, t: a.t, m: a.m.clone(), v: a.v.clone() }
    }
}

impl From<AdamRecord> for Adam {
    fn from(r: AdamRecord) -> Self {
        Adam { beta1: r.beta1, beta2: r.beta2, eps: r.eps, t: r.t, m: r.m, v: r.v }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    /// Completed optimizer steps.
    pub step: u64,
    #[serde(default)]
    pub adam: Option<AdamRecord>,
    /// The training configuration the run used, verbatim.
    #[serde(default)]
    pub train_config: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub kind: ModelKind,
    pub config: MlpConfig,
    pub seed: u64,
    #[serde(with = "decimal_vec")]
    pub params: Vec<f64>,
    #[serde(default)]
    pub sigma_eta: Option<f64>,
    #[serde(default)]
    pub training: Option<TrainingMeta>,
}

impl Checkpoint {
    pub fn from_dde(model: &DdeModel, seed: u64, training: Option<TrainingMeta>) -> Self {
        Checkpoint {
            format: FORMAT.into(),
            kind: ModelKind::Dde,
            config: model.config().clone(),
            seed,
            params: model.params().values().to_vec(),
            sigma_eta: Some(model.sigma_eta()),
            training,
        }
    }

    pub fn from_generator(gen: &GeneratorModel, seed: u64, training: Option<TrainingMeta>) -> Self {
        Checkpoint {
            format: FORMAT.into(),
            kind: ModelKind::Generator,
            config: gen.config().clone(),
            seed,
            params: gen.params().values().to_vec(),
            sigma_eta: None,
            training,
        }
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::config(format!("checkpoint holds a {} model, expected a {kind} model", self.kind)));
        }
        Ok(())
    }

    pub fn to_dde(&self) -> Result<DdeModel> {
        self.expect_kind(ModelKind::Dde)?;
        let sigma = self.sigma_eta.ok_or_else(|| Error::config("energy checkpoint is missing sigma_eta"))?;
        DdeModel::new(MlpParams::from_values(self.config.clone(), self.params.clone())?, sigma)
    }

    pub fn to_generator(&self) -> Result<GeneratorModel> {
        self.expect_kind(ModelKind::Generator)?;
        Ok(GeneratorModel::new(MlpParams::from_values(self.config.clone(), self.params.clone())?))
    }

    /// Optimizer state for resuming, if the checkpoint recorded one.
    pub fn dde_opt_state(&self) -> Result<Option<DdeOptState>> {
        let Some(meta) = &self.training else { return Ok(None) };
        let Some(adam) = &meta.adam else { return Ok(None) };
        if adam.m.len() != self.params.len() || adam.v.len() != self.params.len() {
            return Err(Error::config("checkpoint optimizer moments do not match the parameter count"));
        }
        Ok(Some(DdeOptState { step: meta.step, adam: adam.clone().into() }))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
        if ck.format != FORMAT {
            return Err(Error::config(format!("{}: unsupported checkpoint format {:?}", path.display(), ck.format)));
        }
        ck.config.validate()?;
        if ck.params.len() != ck.config.param_count() {
            return Err(Error::config(format!(
                "{}: {} parameters stored, architecture needs {}",
                path.display(),
                ck.params.len(),
                ck.config.param_count()
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }
}

/// Exact decimal text for an `f64`: 17 significant digits in scientific notation.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

mod decimal_vec {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(values: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(values.iter().map(|v| super::format_f64(*v)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let raw = Vec::<String>::deserialize(d)?;
        raw.iter()
            .enumerate()
            .map(|(i, s)| s.parse::<f64>().map_err(|e| D::Error::custom(format!("value {i} ({s:?}): {e}"))))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decimal_text_round_trips() {
        for v in [0.1, -1.0 / 3.0, f64::MIN_POSITIVE, 5e-324, f64::MAX, 1e300, -0.0, 123456789.123456789] {
            let s = format_f64(v);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits(), "{s}");
        }
    }

    #[test]
    fn dde_round_trip_is_exact_and_bytes_are_stable() {
        let model = DdeModel::init(MlpConfig::dde(2, 2, 6), 0.37, 4).unwrap();
        let mut adam = Adam::new(model.params().len());
        adam.t = 3;
        adam.m[0] = 1.0 / 7.0;
        let meta = TrainingMeta { step: 3, adam: Some((&adam).into()), train_config: None };
        let ck = Checkpoint::from_dde(&model, 11, Some(meta));
        let text = ck.to_json();
        let back = Checkpoint::from_json(&text, Path::new("mem")).unwrap();
        assert_eq!(back.to_dde().unwrap(), model);
        assert_eq!(back.dde_opt_state().unwrap().unwrap().adam, adam);
        assert_eq!(back.to_json(), text);
    }

    #[test]
    fn kind_mismatch_is_config_error() {
        let gen = GeneratorModel::init(MlpConfig::generator(2, 2, 1, 4), 0).unwrap();
        let ck = Checkpoint::from_generator(&gen, 0, None);
        assert!(ck.to_dde().unwrap_err().is_config());
        assert_eq!(ck.to_generator().unwrap(), gen);
    }

    #[test]
    fn truncated_params_rejected() {
        let model = DdeModel::init(MlpConfig::dde(2, 1, 4), 0.5, 0).unwrap();
        let mut ck = Checkpoint::from_dde(&model, 0, None);
        ck.params.pop();
        let err = Checkpoint::from_json(&ck.to_json(), Path::new("x.json")).unwrap_err();
        assert!(err.to_string().contains("parameters"), "{err}");
    }

    #[test]
    fn unknown_fields_rejected() {
        let model = DdeModel::init(MlpConfig::dde(2, 1, 4), 0.5, 0).unwrap();
        let text = Checkpoint::from_dde(&model, 0, None).to_json().replacen('{', "{\"extra\": 1,", 1);
        assert!(Checkpoint::from_json(&text, Path::new("x.json")).is_err());
    }
}
