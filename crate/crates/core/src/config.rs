//! Flat `key=value` configuration with dotted section prefixes
//! (`model.*`, `train.*`, `ssl.*`, `synth.*`).
//!
//! Blank lines and lines starting with `#` are ignored. Lists are
//! comma-separated. Floats are written in shortest round-trip form, so
//! `parse(to_text(c)) == c` holds exactly.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::network::{Ablations, MaskGranularity};
use crate::synthdata::SynthConfig;
use crate::training::TrainingConfig;

pub type KeyValues = BTreeMap<String, String>;

pub fn parse_kv(text: &str) -> Result<KeyValues> {
    let mut out = KeyValues::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1)));
        };
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
        }
    }
    Ok(out)
}

pub fn format_kv(kv: &KeyValues) -> String {
    kv.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse::<T>().map_err(|e| Error::Config(format!("{key}: cannot parse `{v}`: {e}")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| value(key, s))
        .collect()
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn granularity_name(g: MaskGranularity) -> &'static str {
    match g {
        MaskGranularity::Element => "element",
        MaskGranularity::TimePatch => "time_patch",
    }
}

pub fn training_to_kv(c: &TrainingConfig) -> KeyValues {
    let m = &c.model;
    let pairs: Vec<(&str, String)> = vec![
        ("model.nodes", m.nodes.to_string()),
        ("model.bands", m.bands.to_string()),
        ("model.steps", m.steps.to_string()),
        ("model.heads", m.heads.to_string()),
        ("model.encoder_layers", m.encoder_layers.to_string()),
        ("model.main_channels", join(&m.main_channels)),
        ("model.ssl_hidden", join(&m.ssl_hidden)),
        ("model.classifier_hidden", join(&m.classifier_hidden)),
        ("model.tcn_kernel", m.tcn_kernel.to_string()),
        ("model.pe_scale_init", m.pe_scale_init.to_string()),
        ("model.ssl_topk", m.ssl_topk.to_string()),
        ("train.lr0", c.lr0.to_string()),
        ("train.halve_every", c.halve_every.to_string()),
        ("train.epochs", c.epochs.to_string()),
        ("train.batch_size", c.batch_size.to_string()),
        ("train.split", join(&c.split)),
        ("train.topk_ratio", m.topk_ratio.to_string()),
        ("train.seed", c.seed.to_string()),
        ("train.ablations", m.ablations.to_list()),
        ("train.pcgrad_three_way", c.pcgrad_three_way.to_string()),
        ("train.decision_threshold", c.decision_threshold.to_string()),
        ("ssl.mask_rate", c.mask.rate.to_string()),
        ("ssl.mask_granularity", granularity_name(c.mask.granularity).to_string()),
        ("ssl.patch_len", c.mask.patch_len.to_string()),
        ("ssl.recon_masked_only", c.recon_masked_only.to_string()),
        ("ssl.lambda_rec", c.loss.rec.to_string()),
        ("ssl.lambda_sparse", c.loss.sparse.to_string()),
        ("ssl.lambda_cos", c.loss.cos.to_string()),
        ("ssl.lambda_mse", c.loss.mse.to_string()),
        ("ssl.sparse_p", c.sparse_p.to_string()),
    ];
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

pub fn training_to_text(c: &TrainingConfig) -> String {
    format_kv(&training_to_kv(c))
}

/// Apply the `model.*`, `train.*` and `ssl.*` keys of `kv` on top of `base`.
/// Keys from other sections are ignored; unknown keys in these are errors.
pub fn apply_training(base: &TrainingConfig, kv: &KeyValues) -> Result<TrainingConfig> {
    let mut c = base.clone();
    for (k, v) in kv {
        let k = k.as_str();
        let v = v.as_str();
        match k {
            "model.nodes" => c.model.nodes = value(k, v)?,
            "model.bands" => c.model.bands = value(k, v)?,
            "model.steps" => c.model.steps = value(k, v)?,
            "model.heads" => c.model.heads = value(k, v)?,
            "model.encoder_layers" => c.model.encoder_layers = value(k, v)?,
            "model.main_channels" => c.model.main_channels = list(k, v)?,
            "model.ssl_hidden" => c.model.ssl_hidden = list(k, v)?,
            "model.classifier_hidden" => c.model.classifier_hidden = list(k, v)?,
            "model.tcn_kernel" => c.model.tcn_kernel = value(k, v)?,
            "model.pe_scale_init" => c.model.pe_scale_init = value(k, v)?,
            "model.ssl_topk" => c.model.ssl_topk = value(k, v)?,
            "train.lr0" => c.lr0 = value(k, v)?,
            "train.halve_every" => c.halve_every = value(k, v)?,
            "train.epochs" => c.epochs = value(k, v)?,
            "train.batch_size" => c.batch_size = value(k, v)?,
            "train.split" => {
                let s: Vec<f64> = list(k, v)?;
                c.split = s
                    .try_into()
                    .map_err(|_| Error::Config(format!("{k}: expected three fractions, got `{v}`")))?;
            }
            "train.topk_ratio" => c.model.topk_ratio = value(k, v)?,
            "train.seed" => c.seed = value(k, v)?,
            "train.ablations" => c.model.ablations = Ablations::parse_list(v)?,
            "train.pcgrad_three_way" => c.pcgrad_three_way = value(k, v)?,
            "train.decision_threshold" => c.decision_threshold = value(k, v)?,
            "ssl.mask_rate" => c.mask.rate = value(k, v)?,
            "ssl.mask_granularity" => {
                c.mask.granularity = match v {
                    "element" => MaskGranularity::Element,
                    "time_patch" => MaskGranularity::TimePatch,
                    other => return Err(Error::Config(format!("{k}: unknown granularity `{other}`"))),
                }
            }
            "ssl.patch_len" => c.mask.patch_len = value(k, v)?,
            "ssl.recon_masked_only" => c.recon_masked_only = value(k, v)?,
            "ssl.lambda_rec" => c.loss.rec = value(k, v)?,
            "ssl.lambda_sparse" => c.loss.sparse = value(k, v)?,
            "ssl.lambda_cos" => c.loss.cos = value(k, v)?,
            "ssl.lambda_mse" => c.loss.mse = value(k, v)?,
            "ssl.sparse_p" => c.sparse_p = value(k, v)?,
            _ if k.starts_with("model.") || k.starts_with("train.") || k.starts_with("ssl.") => {
                return Err(Error::Config(format!("unknown key `{k}`")))
            }
            _ => {}
        }
    }
    c.model.seed = c.seed;
    c.validate()?;
    Ok(c)
}

pub fn parse_training(text: &str) -> Result<TrainingConfig> {
    apply_training(&TrainingConfig::default(), &parse_kv(text)?)
}

pub fn synth_to_kv(c: &SynthConfig) -> KeyValues {
    let pairs: Vec<(&str, String)> = vec![
        ("synth.node_count", c.node_count.to_string()),
        ("synth.sample_count", c.sample_count.to_string()),
        ("synth.bands", c.bands.to_string()),
        ("synth.steps", c.steps.to_string()),
        ("synth.carrier_bands", join(&c.carrier_bands)),
        ("synth.amplitude", join(&[c.amplitude.0, c.amplitude.1])),
        ("synth.active_prob", c.active_prob.to_string()),
        ("synth.max_bursts", c.max_bursts.to_string()),
        ("synth.duration", join(&[c.duration.0, c.duration.1])),
        ("synth.noise_floor", c.noise_floor.to_string()),
        ("synth.spatial_masking_coeff", c.spatial_masking_coeff.to_string()),
        ("synth.temporal_masking_decay", c.temporal_masking_decay.to_string()),
        ("synth.threshold", c.threshold.to_string()),
        ("synth.kernel_ref_dist", c.kernel_ref_dist.to_string()),
        ("synth.seed", c.seed.to_string()),
    ];
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn pair<T: FromStr + Copy>(key: &str, v: &str) -> Result<(T, T)>
where
    T::Err: Display,
{
    match list::<T>(key, v)?.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(Error::Config(format!("{key}: expected two values, got `{v}`"))),
    }
}

/// Apply the `synth.*` keys of `kv` on top of `base`.
pub fn apply_synth(base: &SynthConfig, kv: &KeyValues) -> Result<SynthConfig> {
    let mut c = base.clone();
    for (k, v) in kv {
        let (k, v) = (k.as_str(), v.as_str());
        match k {
            "synth.node_count" => c.node_count = value(k, v)?,
            "synth.sample_count" => c.sample_count = value(k, v)?,
            "synth.bands" => c.bands = value(k, v)?,
            "synth.steps" => c.steps = value(k, v)?,
            "synth.carrier_bands" => c.carrier_bands = list(k, v)?,
            "synth.amplitude" => c.amplitude = pair(k, v)?,
            "synth.active_prob" => c.active_prob = value(k, v)?,
            "synth.max_bursts" => c.max_bursts = value(k, v)?,
            "synth.duration" => c.duration = pair(k, v)?,
            "synth.noise_floor" => c.noise_floor = value(k, v)?,
            "synth.spatial_masking_coeff" => c.spatial_masking_coeff = value(k, v)?,
            "synth.temporal_masking_decay" => c.temporal_masking_decay = value(k, v)?,
            "synth.threshold" => c.threshold = value(k, v)?,
            "synth.kernel_ref_dist" => c.kernel_ref_dist = value(k, v)?,
            "synth.seed" => c.seed = value(k, v)?,
            _ if k.starts_with("synth.") => return Err(Error::Config(format!("unknown key `{k}`"))),
            _ => {}
        }
    }
    c.validate()?;
    Ok(c)
}
