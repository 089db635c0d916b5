use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{AugmentConfig, Interpolation, SyntheticSpec};
use crate::decorr::DecorrConfig;
use crate::error::{DbpError, Result};
use crate::mae::MaeConfig;
use crate::optim::{AdamWConfig, ScheduleConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Bp,
    Dbp,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Bp => "bp",
            Mode::Dbp => "dbp",
        })
    }
}

impl FromStr for Mode {
    type Err = DbpError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bp" => Ok(Mode::Bp),
            "dbp" => Ok(Mode::Dbp),
            other => Err(DbpError::Config(format!("unknown mode `{other}`, expected bp or dbp"))),
        }
    }
}

/// Source of `wall_seconds`. `Off` reports zero, which makes metrics files
/// byte-comparable across runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Clock {
    #[default]
    Wall,
    Off,
}

impl fmt::Display for Clock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Clock::Wall => "wall",
            Clock::Off => "off",
        })
    }
}

impl FromStr for Clock {
    type Err = DbpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wall" => Ok(Clock::Wall),
            "off" => Ok(Clock::Off),
            other => Err(DbpError::Config(format!("unknown clock `{other}`, expected wall or off"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    File(PathBuf),
}

/// Everything that defines one training run.
///
/// Desk-scale defaults. The reference ViT-Base recipe uses a weight learning
/// rate of 5e-4 for BP and 1e-3 for DBP, a decorrelation rate of 5e-4, 40
/// warmup epochs out of 1000, batch size 4096, mask ratio 0.75 and a 10%
/// subsample for the correlation estimate; see [`TrainConfig::full_scale`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mae: MaeConfig,
    pub decorr: DecorrConfig,
    pub adamw: AdamWConfig,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: Mode,
    pub data: DataSource,
    /// Share of the dataset, taken from its tail, held out for validation.
    pub val_fraction: f64,
    pub augment_enabled: bool,
    pub augment: AugmentConfig,
    pub output_dir: PathBuf,
    pub clock: Clock,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mae: MaeConfig::desk(),
            decorr: DecorrConfig::default(),
            adamw: AdamWConfig::default(),
            lr: 1.0e-3,
            min_lr: 0.0,
            warmup_epochs: 5,
            epochs: 60,
            batch_size: 128,
            seed: 0,
            mode: Mode::Bp,
            data: DataSource::Synthetic(SyntheticSpec::default()),
            val_fraction: 0.10,
            augment_enabled: true,
            augment: AugmentConfig::default(),
            output_dir: PathBuf::from("runs/default"),
            clock: Clock::Wall,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| DbpError::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(DbpError::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

impl TrainConfig {
    /// ViT-Base hyperparameters at full scale (DBP variant).
    pub fn full_scale() -> Self {
        Self {
            mae: MaeConfig::vit_base(),
            decorr: DecorrConfig {
                eta: 5.0e-4,
                subsample_fraction: 0.10,
                ..DecorrConfig::default()
            },
            lr: 1.0e-3,
            warmup_epochs: 40,
            epochs: 1000,
            batch_size: 4096,
            mode: Mode::Dbp,
            data: DataSource::File(PathBuf::from("data/train.dbptnsr")),
            augment: AugmentConfig {
                interpolation: Interpolation::Bicubic,
                ..AugmentConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            base_lr: self.lr,
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.epochs,
            min_lr: self.min_lr,
        }
    }

    /// Decorrelation sites for this run: empty in BP mode.
    pub fn decorr_sites(&self) -> Vec<String> {
        match self.mode {
            Mode::Bp => Vec::new(),
            Mode::Dbp => self.measured_sites(),
        }
    }

    /// Sites whose input correlation is reported, in either mode.
    pub fn measured_sites(&self) -> Vec<String> {
        self.mae.decorr_sites(self.decorr.scope, self.decorr.per_linear_mode)
    }

    pub fn validate(&self) -> Result<()> {
        self.mae.validate()?;
        self.decorr.validate()?;
        self.augment.validate()?;
        let sched = self.schedule();
        if self.epochs > 0 || self.warmup_epochs > 0 {
            sched.validate()?;
        }
        if self.mode == Mode::Dbp && self.decorr.eta <= 0.0 {
            return Err(DbpError::Config("train.mode = dbp requires decorr.eta > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(DbpError::Config("train.batch_size must be positive".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(DbpError::Config(format!(
                "data.val_fraction must be in (0, 1), got {}",
                self.val_fraction
            )));
        }
        let AdamWConfig {
            beta1,
            beta2,
            weight_decay,
            epsilon,
        } = self.adamw;
        if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && weight_decay >= 0.0 && epsilon > 0.0) {
            return Err(DbpError::Config(format!("invalid AdamW settings {:?}", self.adamw)));
        }
        if let DataSource::Synthetic(spec) = &self.data {
            if spec.channels != self.mae.channels || spec.size != self.mae.image_size {
                return Err(DbpError::Config(format!(
                    "synthetic images are {}x{}x{} but the model expects {}x{}x{}",
                    spec.channels, spec.size, spec.size, self.mae.channels, self.mae.image_size, self.mae.image_size
                )));
            }
        }
        Ok(())
    }

    /// Sets one dotted key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let k = key.trim();
        match k {
            "mae.image_size" => self.mae.image_size = parse(k, v)?,
            "mae.patch_size" => self.mae.patch_size = parse(k, v)?,
            "mae.channels" => self.mae.channels = parse(k, v)?,
            "mae.embed_dim" => self.mae.embed_dim = parse(k, v)?,
            "mae.depth" => self.mae.depth = parse(k, v)?,
            "mae.heads" => self.mae.heads = parse(k, v)?,
            "mae.mlp_ratio" => self.mae.mlp_ratio = parse(k, v)?,
            "mae.decoder_embed_dim" => self.mae.decoder_embed_dim = parse(k, v)?,
            "mae.decoder_depth" => self.mae.decoder_depth = parse(k, v)?,
            "mae.decoder_heads" => self.mae.decoder_heads = parse(k, v)?,
            "mae.mask_ratio" => self.mae.mask_ratio = parse(k, v)?,
            "mae.loss_on_masked_only" => self.mae.loss_on_masked_only = parse_bool(k, v)?,
            "mae.norm_pix_loss" => self.mae.norm_pix_loss = parse_bool(k, v)?,
            "decorr.eta" => self.decorr.eta = parse(k, v)?,
            "decorr.subsample_fraction" => self.decorr.subsample_fraction = parse(k, v)?,
            "decorr.scope" => self.decorr.scope = v.parse()?,
            "decorr.stop_epoch" => {
                self.decorr.stop_epoch = match v {
                    "never" | "none" => None,
                    _ => Some(parse(k, v)?),
                }
            }
            "decorr.per_linear_mode" => self.decorr.per_linear_mode = parse_bool(k, v)?,
            "optim.lr" => self.lr = parse(k, v)?,
            "optim.min_lr" => self.min_lr = parse(k, v)?,
            "optim.warmup_epochs" => self.warmup_epochs = parse(k, v)?,
            "optim.beta1" => self.adamw.beta1 = parse(k, v)?,
            "optim.beta2" => self.adamw.beta2 = parse(k, v)?,
            "optim.weight_decay" => self.adamw.weight_decay = parse(k, v)?,
            "optim.epsilon" => self.adamw.epsilon = parse(k, v)?,
            "train.epochs" => self.epochs = parse(k, v)?,
            "train.batch_size" => self.batch_size = parse(k, v)?,
            "train.seed" => self.seed = parse(k, v)?,
            "train.mode" => self.mode = v.parse()?,
            "train.output_dir" => self.output_dir = PathBuf::from(v),
            "train.clock" => self.clock = v.parse()?,
            "data.source" => {
                self.data = match v {
                    "synthetic" => DataSource::Synthetic(match &self.data {
                        DataSource::Synthetic(s) => s.clone(),
                        DataSource::File(_) => SyntheticSpec::default(),
                    }),
                    path => DataSource::File(PathBuf::from(path)),
                }
            }
            "data.val_fraction" => self.val_fraction = parse(k, v)?,
            "data.synthetic.count" | "data.synthetic.channels" | "data.synthetic.size"
            | "data.synthetic.correlation_length" | "data.synthetic.seed" => {
                let DataSource::Synthetic(spec) = &mut self.data else {
                    return Err(DbpError::Config(format!(
                        "`{k}` requires data.source = synthetic"
                    )));
                };
                match k {
                    "data.synthetic.count" => spec.count = parse(k, v)?,
                    "data.synthetic.channels" => spec.channels = parse(k, v)?,
                    "data.synthetic.size" => spec.size = parse(k, v)?,
                    "data.synthetic.correlation_length" => spec.correlation_length = parse(k, v)?,
                    _ => spec.seed = parse(k, v)?,
                }
            }
            "augment.enabled" => self.augment_enabled = parse_bool(k, v)?,
            "augment.random_crop" => self.augment.random_crop = parse_bool(k, v)?,
            "augment.crop_scale_min" => self.augment.crop_scale.0 = parse(k, v)?,
            "augment.crop_scale_max" => self.augment.crop_scale.1 = parse(k, v)?,
            "augment.flip_prob" => self.augment.flip_prob = parse(k, v)?,
            "augment.interpolation" => self.augment.interpolation = v.parse()?,
            _ => return Err(DbpError::Config(format!("unknown config key `{k}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                DbpError::Config(format!("line {}: expected `key = value`, got `{raw}`", n + 1))
            })?;
            self.set(k, v)
                .map_err(|e| e.annotate(format!("line {}", n + 1)))?;
        }
        Ok(())
    }

    /// Parses a complete config text over the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        Self::from_text(&text).map_err(|e| e.annotate(path.display().to_string()))
    }

    /// Every key with its current value, parseable by [`TrainConfig::from_text`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        let m = &self.mae;
        put("mae.image_size", m.image_size.to_string());
        put("mae.patch_size", m.patch_size.to_string());
        put("mae.channels", m.channels.to_string());
        put("mae.embed_dim", m.embed_dim.to_string());
        put("mae.depth", m.depth.to_string());
        put("mae.heads", m.heads.to_string());
        put("mae.mlp_ratio", m.mlp_ratio.to_string());
        put("mae.decoder_embed_dim", m.decoder_embed_dim.to_string());
        put("mae.decoder_depth", m.decoder_depth.to_string());
        put("mae.decoder_heads", m.decoder_heads.to_string());
        put("mae.mask_ratio", format!("{:?}", m.mask_ratio));
        put("mae.loss_on_masked_only", m.loss_on_masked_only.to_string());
        put("mae.norm_pix_loss", m.norm_pix_loss.to_string());
        let d = &self.decorr;
        put("decorr.eta", format!("{:?}", d.eta));
        put("decorr.subsample_fraction", format!("{:?}", d.subsample_fraction));
        put("decorr.scope", d.scope.to_string());
        put(
            "decorr.stop_epoch",
            d.stop_epoch.map_or_else(|| "never".to_string(), |e| e.to_string()),
        );
        put("decorr.per_linear_mode", d.per_linear_mode.to_string());
        put("optim.lr", format!("{:?}", self.lr));
        put("optim.min_lr", format!("{:?}", self.min_lr));
        put("optim.warmup_epochs", self.warmup_epochs.to_string());
        put("optim.beta1", format!("{:?}", self.adamw.beta1));
        put("optim.beta2", format!("{:?}", self.adamw.beta2));
        put("optim.weight_decay", format!("{:?}", self.adamw.weight_decay));
        put("optim.epsilon", format!("{:?}", self.adamw.epsilon));
        put("train.epochs", self.epochs.to_string());
        put("train.batch_size", self.batch_size.to_string());
        put("train.seed", self.seed.to_string());
        put("train.mode", self.mode.to_string());
        put("train.output_dir", self.output_dir.display().to_string());
        put("train.clock", self.clock.to_string());
        match &self.data {
            DataSource::Synthetic(spec) => {
                put("data.source", "synthetic".into());
                put("data.synthetic.count", spec.count.to_string());
                put("data.synthetic.channels", spec.channels.to_string());
                put("data.synthetic.size", spec.size.to_string());
                put("data.synthetic.correlation_length", format!("{:?}", spec.correlation_length));
                put("data.synthetic.seed", spec.seed.to_string());
            }
            DataSource::File(p) => put("data.source", p.display().to_string()),
        }
        put("data.val_fraction", format!("{:?}", self.val_fraction));
        put("augment.enabled", self.augment_enabled.to_string());
        put("augment.random_crop", self.augment.random_crop.to_string());
        put("augment.crop_scale_min", format!("{:?}", self.augment.crop_scale.0));
        put("augment.crop_scale_max", format!("{:?}", self.augment.crop_scale.1));
        put("augment.flip_prob", format!("{:?}", self.augment.flip_prob));
        put("augment.interpolation", self.augment.interpolation.to_string());
        s
    }
}
