//! Key-value config files: one `section.key = value` per line, `#`
//! comments, no quoting. The same format drives every subcommand;
//! command-line flags override file values.

use amgc::loss::LossWeights;
use amgc::train::TrainConfig;
use amgc::{Error, Result};
use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Default, Clone)]
pub struct KvConfig {
    map: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn empty() -> KvConfig {
        KvConfig::default()
    }

    pub fn load(path: &Path) -> Result<KvConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{}:{}: expected `section.key = value`, got {raw:?}",
                    path.display(),
                    lineno + 1
                )));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() || value.is_empty() {
                return Err(Error::Config(format!(
                    "{}:{}: empty key or value",
                    path.display(),
                    lineno + 1
                )));
            }
            if map.insert(key.clone(), value).is_some() {
                return Err(Error::Config(format!(
                    "{}:{}: duplicate key {key}",
                    path.display(),
                    lineno + 1
                )));
            }
        }
        Ok(KvConfig { map })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    pub fn parse_as<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.map.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| {
                Error::Config(format!("key {key}: cannot parse {v:?} as {}", std::any::type_name::<T>()))
            }),
        }
    }

    fn parse_bool(&self, key: &str) -> Result<Option<bool>> {
        match self.map.get(key).map(|s| s.as_str()) {
            None => Ok(None),
            Some("true") | Some("1") | Some("yes") => Ok(Some(true)),
            Some("false") | Some("0") | Some("no") => Ok(Some(false)),
            Some(v) => Err(Error::Config(format!("key {key}: cannot parse {v:?} as bool"))),
        }
    }

    /// Overlay this file onto a [`TrainConfig`]. Unknown keys outside the
    /// reserved sections are an error so typos surface immediately.
    pub fn apply_train(&self, cfg: &mut TrainConfig) -> Result<()> {
        const SECTIONS: [&str; 5] = ["model.", "train.", "loss.", "ablate.", "synth."];
        const KNOWN: [&str; 30] = [
            "model.resolution",
            "model.img_channels",
            "model.base_channels",
            "model.disc_channels",
            "model.phi",
            "model.attention_patch",
            "model.attention_scale",
            "model.disc_sees_weighted",
            "model.paste_coarse",
            "train.batch_size",
            "train.steps",
            "train.lr_g",
            "train.lr_d",
            "train.beta1",
            "train.beta2",
            "train.adam_eps",
            "train.seed",
            "train.backbone_seed",
            "train.sn_iters",
            "train.log_every",
            "train.save_every",
            "loss.adversarial",
            "loss.perceptual",
            "loss.patch",
            "loss.style",
            "loss.reconstruction",
            "ablate.adversarial",
            "ablate.perceptual",
            "ablate.patch",
            "ablate.style",
        ];
        for key in self.map.keys() {
            let in_section = SECTIONS.iter().any(|s| key.starts_with(s));
            let known = KNOWN.contains(&key.as_str())
                || key == "ablate.reconstruction"
                || key.starts_with("synth.");
            if in_section && !known {
                return Err(Error::Config(format!("unknown config key {key}")));
            }
            if !in_section {
                return Err(Error::Config(format!("unknown config section in key {key}")));
            }
        }

        macro_rules! set {
            ($field:expr, $key:expr, $ty:ty) => {
                if let Some(v) = self.parse_as::<$ty>($key)? {
                    $field = v;
                }
            };
        }
        set!(cfg.model.resolution, "model.resolution", usize);
        set!(cfg.model.img_channels, "model.img_channels", usize);
        set!(cfg.model.base_channels, "model.base_channels", usize);
        set!(cfg.model.disc_channels, "model.disc_channels", usize);
        if let Some(v) = self.get("model.phi") {
            cfg.model.phi = v.parse()?;
        }
        set!(cfg.model.attention_patch, "model.attention_patch", usize);
        set!(cfg.model.attention_scale, "model.attention_scale", f64);
        if let Some(v) = self.parse_bool("model.disc_sees_weighted")? {
            cfg.model.disc_sees_weighted = v;
        }
        if let Some(v) = self.parse_bool("model.paste_coarse")? {
            cfg.model.paste_coarse = v;
        }
        set!(cfg.batch_size, "train.batch_size", usize);
        set!(cfg.steps, "train.steps", u64);
        set!(cfg.lr_g, "train.lr_g", f64);
        set!(cfg.lr_d, "train.lr_d", f64);
        set!(cfg.beta1, "train.beta1", f64);
        set!(cfg.beta2, "train.beta2", f64);
        set!(cfg.adam_eps, "train.adam_eps", f64);
        set!(cfg.seed, "train.seed", u64);
        set!(cfg.backbone_seed, "train.backbone_seed", u64);
        set!(cfg.sn_iters, "train.sn_iters", usize);
        set!(cfg.log_every, "train.log_every", u64);
        set!(cfg.save_every, "train.save_every", u64);
        set!(cfg.weights.adversarial, "loss.adversarial", f64);
        set!(cfg.weights.perceptual, "loss.perceptual", f64);
        set!(cfg.weights.patch, "loss.patch", f64);
        set!(cfg.weights.style, "loss.style", f64);
        set!(cfg.weights.reconstruction, "loss.reconstruction", f64);
        for (name, slot) in [
            ("ablate.adversarial", &mut cfg.ablate.adversarial),
            ("ablate.perceptual", &mut cfg.ablate.perceptual),
            ("ablate.patch", &mut cfg.ablate.patch),
            ("ablate.style", &mut cfg.ablate.style),
            ("ablate.reconstruction", &mut cfg.ablate.reconstruction),
        ] {
            if let Some(v) = self.parse_bool(name)? {
                *slot = v;
            }
        }
        Ok(())
    }

    /// Overlay `synth.*` keys onto compositor settings.
    pub fn apply_synth(&self, settings: &mut amgc::data::SynthSettings) -> Result<()> {
        macro_rules! set {
            ($field:expr, $key:expr, $ty:ty) => {
                if let Some(v) = self.parse_as::<$ty>($key)? {
                    $field = v;
                }
            };
        }
        set!(settings.size, "synth.size", usize);
        set!(settings.ratio_bounds.0, "synth.min_ratio", f64);
        set!(settings.ratio_bounds.1, "synth.max_ratio", f64);
        set!(settings.scale_range.0, "synth.scale_min", f64);
        set!(settings.scale_range.1, "synth.scale_max", f64);
        set!(settings.max_tries, "synth.tries", usize);
        Ok(())
    }
}

/// Dotted `key = value` lines for the fully resolved config, sorted, for
/// the run log.
pub fn resolved_lines(cfg: &TrainConfig) -> Vec<String> {
    fn flatten(prefix: &str, v: &serde_json::Value, out: &mut BTreeMap<String, String>) {
        match v {
            serde_json::Value::Object(map) => {
                for (k, v) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    flatten(&key, v, out);
                }
            }
            other => {
                out.insert(prefix.to_string(), other.to_string());
            }
        }
    }
    let value = serde_json::to_value(cfg).expect("config serializes");
    let mut map = BTreeMap::new();
    flatten("", &value, &mut map);
    map.into_iter().map(|(k, v)| format!("{k} = {v}")).collect()
}

/// λ weights with the ablation switches applied, as the trainer will use
/// them.
pub fn effective_weight_line(w: &LossWeights) -> String {
    format!(
        "effective weights: adversarial={} perceptual={} patch={} style={} reconstruction={}",
        w.adversarial, w.perceptual, w.patch, w.style, w.reconstruction
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(content: &str) -> std::path::PathBuf {
        let path = std::env::temp_dir().join(format!(
            "amgc-kv-{}-{}.conf",
            std::process::id(),
            content.len()
        ));
        std::fs::write(&path, content).unwrap();
        path
    }

    #[test]
    fn parses_and_applies() {
        let path = write_tmp(
            "# comment\nmodel.resolution = 32\ntrain.steps = 5\nloss.patch = 0\nablate.style = true\nmodel.phi = relu\n",
        );
        let kv = KvConfig::load(&path).unwrap();
        let mut cfg = TrainConfig::default();
        kv.apply_train(&mut cfg).unwrap();
        assert_eq!(cfg.model.resolution, 32);
        assert_eq!(cfg.steps, 5);
        assert_eq!(cfg.weights.patch, 0.0);
        assert!(cfg.ablate.style);
        assert_eq!(cfg.model.phi, amgc::tensor::ActKind::Relu);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn rejects_malformed_lines_and_unknown_keys() {
        let path = write_tmp("model.resolution 32\n");
        assert!(KvConfig::load(&path).is_err());
        std::fs::remove_file(&path).ok();

        let path = write_tmp("model.resolutio = 32\n");
        let kv = KvConfig::load(&path).unwrap();
        let mut cfg = TrainConfig::default();
        assert!(kv.apply_train(&mut cfg).is_err());
        std::fs::remove_file(&path).ok();

        let path = write_tmp("train.seed = 1\ntrain.seed = 2\n");
        assert!(KvConfig::load(&path).is_err());
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn resolved_lines_are_sorted_and_complete() {
        let lines = resolved_lines(&TrainConfig::default());
        assert!(lines.iter().any(|l| l.starts_with("model.resolution = ")));
        assert!(lines.iter().any(|l| l.starts_with("weights.patch = ")));
        let mut sorted = lines.clone();
        sorted.sort();
        assert_eq!(lines, sorted);
    }
}
