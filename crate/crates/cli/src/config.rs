//! Run configuration: flat `section.key = value` text.
//!
//! Every key is optional; unknown or repeated keys are rejected. Mask layer
//! ranges default to the reference 24-block setting scaled to the encoder
//! depth. [`RunConfig::to_text`] writes every resolved key, and parsing that
//! text back yields the same config.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use uvtok_core::attack::AttackConfig;
use uvtok_core::encoder::{read_checkpoint, EncoderConfig, LayerRange};
use uvtok_core::mask::{MaskConfig, DEFAULT_SIGMA_TH};
use uvtok_core::{Error, Result};

/// Environment variable that overrides `run.output_dir`.
pub const OUT_DIR_ENV: &str = "UVTOK_OUT_DIR";

pub const KEYS: &[&str] = &[
    "encoder.image_size",
    "encoder.patch_size",
    "encoder.channels",
    "encoder.num_layers",
    "encoder.hidden_dim",
    "encoder.num_heads",
    "encoder.mlp_ratio",
    "encoder.include_cls",
    "model.checkpoint",
    "model.seed",
    "attack.k",
    "attack.alpha",
    "attack.iterations",
    "attack.init_noise_seed",
    "attack.consistency_seeds",
    "mask.source_layers",
    "mask.sigma_th",
    "mask.layers",
    "mask.attenuation",
    "mc.p",
    "mc.samples",
    "mc.seed",
    "run.output_dir",
    "run.parallelism",
    "run.seed",
];

/// Keys that change where or how fast a run executes but no emitted number.
pub const EXECUTION_KEYS: &[&str] = &["run.output_dir", "run.parallelism"];

#[derive(Clone, Debug, PartialEq)]
pub struct McConfig {
    pub p: f64,
    pub samples: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub checkpoint: Option<PathBuf>,
    pub model_seed: u64,
    pub attack: AttackConfig,
    /// Initial-noise seeds for the mask-consistency check; empty disables it.
    pub consistency_seeds: Vec<u64>,
    pub mask: MaskConfig,
    pub mc: McConfig,
    pub output_dir: PathBuf,
    pub parallelism: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::resolve(&BTreeMap::new()).expect("defaults are valid")
    }
}

/// Raw `key → value` pairs, in key order.
pub type RawConfig = BTreeMap<String, String>;

pub fn parse_text(text: &str) -> Result<RawConfig> {
    let mut raw = RawConfig::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected key = value", n + 1)));
        };
        insert(&mut raw, k.trim(), v.trim(), &format!("line {}", n + 1))?;
    }
    Ok(raw)
}

fn insert(raw: &mut RawConfig, key: &str, value: &str, origin: &str) -> Result<()> {
    if !KEYS.contains(&key) {
        return Err(Error::Config(format!("{origin}: unknown key {key:?}")));
    }
    if raw.insert(key.to_string(), value.to_string()).is_some() {
        return Err(Error::Config(format!("{origin}: key {key:?} given twice")));
    }
    Ok(())
}

/// Applies `key=value` overrides on top of `raw`; later overrides win.
pub fn apply_overrides(raw: &mut RawConfig, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let Some((k, v)) = o.split_once('=') else {
            return Err(Error::Config(format!("override {o:?} is not key=value")));
        };
        let k = k.trim();
        raw.remove(k);
        insert(raw, k, v.trim(), "override")?;
    }
    Ok(())
}

fn get<T: std::str::FromStr>(raw: &RawConfig, key: &str, default: T) -> Result<T> {
    match raw.get(key) {
        None => Ok(default),
        Some(v) => v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}"))),
    }
}

fn get_opt_u64(raw: &RawConfig, key: &str) -> Result<Option<u64>> {
    match raw.get(key).map(String::as_str) {
        None | Some("none") | Some("") => Ok(None),
        Some(_) => get(raw, key, 0).map(Some),
    }
}

fn get_range(raw: &RawConfig, key: &str, default: LayerRange) -> Result<LayerRange> {
    match raw.get(key) {
        None => Ok(default),
        Some(v) => v.parse().map_err(|e: Error| Error::Config(format!("{key}: {e}"))),
    }
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        Self::resolve(&parse_text(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn resolve(raw: &RawConfig) -> Result<Self> {
        let d = EncoderConfig::default();
        let mut encoder = EncoderConfig {
            image_size: get(raw, "encoder.image_size", d.image_size)?,
            patch_size: get(raw, "encoder.patch_size", d.patch_size)?,
            channels: get(raw, "encoder.channels", d.channels)?,
            num_layers: get(raw, "encoder.num_layers", d.num_layers)?,
            hidden_dim: get(raw, "encoder.hidden_dim", d.hidden_dim)?,
            num_heads: get(raw, "encoder.num_heads", d.num_heads)?,
            mlp_ratio: get(raw, "encoder.mlp_ratio", d.mlp_ratio)?,
            include_cls: get(raw, "encoder.include_cls", d.include_cls)?,
        };
        let checkpoint = raw.get("model.checkpoint").filter(|p| !p.is_empty()).map(PathBuf::from);
        if let Some(path) = &checkpoint {
            // the checkpoint carries its own geometry; explicit keys must agree with it
            let (stored, _) = read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))?;
            if raw.keys().any(|k| k.starts_with("encoder.")) {
                if stored != encoder {
                    return Err(Error::Config(format!(
                        "encoder keys {encoder:?} disagree with checkpoint {}: {stored:?}",
                        path.display()
                    )));
                }
            } else {
                encoder = stored;
            }
        }
        encoder.validate()?;

        let ad = AttackConfig::default();
        let attack = AttackConfig {
            budget: get(raw, "attack.k", ad.budget)?,
            step: get(raw, "attack.alpha", ad.step)?,
            iterations: get(raw, "attack.iterations", ad.iterations)?,
            init_noise_seed: get_opt_u64(raw, "attack.init_noise_seed")?,
            rng_seed: 0,
        };
        attack.validate()?;
        let consistency_seeds = match raw.get("attack.consistency_seeds").map(|s| s.trim()) {
            None | Some("") | Some("none") => vec![],
            Some(list) => list
                .split(',')
                .map(|s| {
                    s.trim().parse().map_err(|_| Error::Config(format!("attack.consistency_seeds: bad seed {s:?}")))
                })
                .collect::<Result<_>>()?,
        };
        if consistency_seeds.len() == 1 {
            return Err(Error::Config("attack.consistency_seeds needs at least 2 seeds".into()));
        }

        let md = MaskConfig::for_depth(encoder.num_layers);
        let mask = MaskConfig {
            source_layers: get_range(raw, "mask.source_layers", md.source_layers)?,
            sigma_th: get(raw, "mask.sigma_th", DEFAULT_SIGMA_TH)?,
            mask_layers: get_range(raw, "mask.layers", md.mask_layers)?,
            attenuation: get(raw, "mask.attenuation", md.attenuation)?,
        };
        mask.validate(encoder.num_layers)?;

        let mc = McConfig {
            p: get(raw, "mc.p", 0.5)?,
            samples: get(raw, "mc.samples", 500)?,
            seed: get(raw, "mc.seed", 0)?,
        };
        if !(0.0..1.0).contains(&mc.p) {
            return Err(Error::Config(format!("mc.p must lie in [0, 1), got {}", mc.p)));
        }
        if mc.samples < 2 {
            return Err(Error::Config("mc.samples must be at least 2".into()));
        }

        let parallelism = get(raw, "run.parallelism", 1usize)?;
        if parallelism == 0 {
            return Err(Error::Config("run.parallelism must be at least 1".into()));
        }
        Ok(Self {
            encoder,
            checkpoint,
            model_seed: get(raw, "model.seed", 0)?,
            attack,
            consistency_seeds,
            mask,
            mc,
            output_dir: PathBuf::from(get(raw, "run.output_dir", "uvtok-out".to_string())?),
            parallelism,
            seed: get(raw, "run.seed", 0)?,
        })
    }

    /// Every key with its resolved value, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let e = &self.encoder;
        let seeds: Vec<String> = self.consistency_seeds.iter().map(u64::to_string).collect();
        let lines = [
            ("encoder.image_size", e.image_size.to_string()),
            ("encoder.patch_size", e.patch_size.to_string()),
            ("encoder.channels", e.channels.to_string()),
            ("encoder.num_layers", e.num_layers.to_string()),
            ("encoder.hidden_dim", e.hidden_dim.to_string()),
            ("encoder.num_heads", e.num_heads.to_string()),
            ("encoder.mlp_ratio", e.mlp_ratio.to_string()),
            ("encoder.include_cls", e.include_cls.to_string()),
            ("model.checkpoint", self.checkpoint.as_ref().map_or(String::new(), |p| p.display().to_string())),
            ("model.seed", self.model_seed.to_string()),
            ("attack.k", self.attack.budget.to_string()),
            ("attack.alpha", self.attack.step.to_string()),
            ("attack.iterations", self.attack.iterations.to_string()),
            ("attack.init_noise_seed", self.attack.init_noise_seed.map_or("none".into(), |s| s.to_string())),
            ("attack.consistency_seeds", if seeds.is_empty() { "none".into() } else { seeds.join(",") }),
            ("mask.source_layers", self.mask.source_layers.to_string()),
            ("mask.sigma_th", self.mask.sigma_th.to_string()),
            ("mask.layers", self.mask.mask_layers.to_string()),
            ("mask.attenuation", self.mask.attenuation.to_string()),
            ("mc.p", self.mc.p.to_string()),
            ("mc.samples", self.mc.samples.to_string()),
            ("mc.seed", self.mc.seed.to_string()),
            ("run.output_dir", self.output_dir.display().to_string()),
            ("run.parallelism", self.parallelism.to_string()),
            ("run.seed", self.seed.to_string()),
        ];
        lines.iter().map(|(k, v)| if v.is_empty() { format!("{k} =\n") } else { format!("{k} = {v}\n") }).collect()
    }

    /// [`Self::to_text`] without [`EXECUTION_KEYS`]: the echo stored in
    /// reports, identical for runs that must produce identical results.
    pub fn to_echo(&self) -> String {
        self.to_text()
            .lines()
            .filter(|l| !EXECUTION_KEYS.iter().any(|k| l.starts_with(&format!("{k} ="))))
            .map(|l| format!("{l}\n"))
            .collect()
    }

    /// Explains how the default layer sets follow from the encoder depth.
    pub fn scaled_layers_note(&self) -> String {
        format!(
            "default layer sets scale the reference 24-block setting (sources 1-10, masking 13-17) to {} blocks with ceil: sources {}, masking {}",
            self.encoder.num_layers,
            MaskConfig::for_depth(self.encoder.num_layers).source_layers,
            MaskConfig::for_depth(self.encoder.num_layers).mask_layers,
        )
    }
}
