//! Run configuration in a sectioned `key = value` text format:
//!
//! ```text
//! [model]
//! mode = transwcd_dl
//! stream = dual
//!
//! [train]
//! base_lr = 5e-5
//! ```
//!
//! Lines starting with `#` or `;` are comments. Lists are comma separated,
//! optionally inside brackets. Keys are addressed as `section.key` by
//! overrides. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::cam::CamConfig;
use crate::decoder::DilationConfig;
use crate::difference::{DifferenceKind, DifferenceVariant, Placement};
use crate::encoder::{EncoderConfig, NUM_STAGES};
use crate::error::{Error, Result};
use crate::lg::{LgConfig, LgMode, MaskSource};
use crate::model::ModelConfig;
use crate::objective::{Mode, DEFAULT_DP_START, DEFAULT_EPSILON_CP};

use super::schedule::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic {
        num_pairs: usize,
        size: usize,
        changed_ratio: f64,
        seed: u64,
        max_objects: usize,
    },
    Directory {
        root: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub train_split: crate::data::Split,
    pub eval_split: crate::data::Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Encoder initialisation: `None` for random, or a checkpoint to copy `encoder.*` weights from.
    pub encoder_init: Option<PathBuf>,
    pub encoder_preset: String,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output_dir: PathBuf,
}

fn parse_ini(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut section = String::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
        if section.is_empty() {
            return Err(Error::Config(format!("line {}: key outside any section", no + 1)));
        }
        let key = format!("{section}.{}", k.trim());
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("duplicate key {key}")));
        }
    }
    Ok(out)
}

/// Split `key=value` as given on the command line.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` must look like section.key=value")))?;
    let k = k.trim();
    if !k.contains('.') {
        return Err(Error::Config(format!("override key `{k}` needs a section")));
    }
    Ok((k.to_string(), v.trim().to_string()))
}

struct Fields(BTreeMap<String, String>);

impl Fields {
    fn raw(&mut self, key: &str) -> Option<String> {
        self.0.remove(key)
    }

    fn get<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.0.remove(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`"))),
        }
    }

    fn list<T: FromStr>(&mut self, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        match self.0.remove(key) {
            None => Ok(default),
            Some(v) => parse_list(&v).map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`"))),
        }
    }

    fn array<T: FromStr + Copy>(&mut self, key: &str, default: [T; NUM_STAGES]) -> Result<[T; NUM_STAGES]> {
        let v = self.list(key, default.to_vec())?;
        v.try_into()
            .map_err(|_| Error::Config(format!("{key}: expected {NUM_STAGES} values")))
    }

    fn finish(self) -> Result<()> {
        match self.0.keys().next() {
            None => Ok(()),
            Some(k) => Err(Error::Config(format!("unknown config key {k}"))),
        }
    }
}

pub fn parse_list<T: FromStr>(s: &str) -> std::result::Result<Vec<T>, ()> {
    let inner = s.trim().trim_start_matches('[').trim_end_matches(']');
    if inner.trim().is_empty() {
        return Ok(Vec::new());
    }
    inner.split(',').map(|x| x.trim().parse().map_err(|_| ())).collect()
}

fn parse_bool(s: &str) -> Result<bool> {
    match s {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("expected a boolean, got `{s}`"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut map = parse_ini(text)?;
        for (k, v) in overrides {
            map.insert(k.clone(), v.clone());
        }
        let mut f = Fields(map);

        let mode: Mode = f.get("model.mode", Mode::TranswcdDl)?;
        let stream = f.raw("model.stream").unwrap_or_else(|| "dual".into());
        let placement = match stream.as_str() {
            "single" => Placement::Early,
            "dual" => Placement::Late,
            s => return Err(Error::Config(format!("model.stream must be single or dual, got `{s}`"))),
        };
        let default_kind = match placement {
            Placement::Early => DifferenceVariant::early_default().kind,
            Placement::Late => DifferenceVariant::late_default().kind,
        };
        let kind: DifferenceKind = f.get("model.difference", default_kind)?;
        let difference = DifferenceVariant::new(placement, kind)?;
        let preset = f.raw("model.encoder").unwrap_or_else(|| "desk".into());
        let base = EncoderConfig::preset(&preset)?;
        let encoder = EncoderConfig {
            embed_dims: f.array("encoder.embed_dims", base.embed_dims)?,
            depths: f.array("encoder.depths", base.depths)?,
            heads: f.array("encoder.heads", base.heads)?,
            mlp_ratio: f.get("encoder.mlp_ratio", base.mlp_ratio)?,
            attention_reduction: f.array("encoder.attention_reduction", base.attention_reduction)?,
            drop_rate: f.get("encoder.drop_rate", base.drop_rate)?,
            patch_strides: f.array("encoder.patch_strides", base.patch_strides)?,
        };
        let encoder_init = match f.raw("encoder.init").as_deref() {
            None | Some("random") => None,
            Some(path) => Some(PathBuf::from(path)),
        };

        let cam_default = CamConfig::default();
        let cam = CamConfig {
            scales: f.list("cam.scales", cam_default.scales)?,
            eps_norm: f.get("cam.eps_norm", cam_default.eps_norm)?,
            tau: f.get("cam.tau", cam_default.tau)?,
        };
        let dp_default = DilationConfig::desk();
        let dp = DilationConfig {
            rates: f.list("dp.rates", dp_default.rates)?,
            branch_channels: f.get("dp.branch_channels", dp_default.branch_channels)?,
        };
        let dp_start: u64 = f.get("dp.start_iteration", DEFAULT_DP_START)?;

        let lg_default = if mode.uses_dp() {
            LgConfig::default()
        } else {
            LgConfig::for_cam_only()
        };
        let lg = LgConfig {
            alpha: f.get("lg.alpha", lg_default.alpha)?,
            mode: f.get::<LgMode>("lg.mode", lg_default.mode)?,
            mask_source: f.get::<MaskSource>("lg.mask_source", lg_default.mask_source)?,
        };
        if mode.uses_lg() && lg.mask_source == MaskSource::Final && !mode.uses_dp() {
            return Err(Error::Config(format!(
                "lg.mask_source = final needs a decoder, but mode is {mode}"
            )));
        }
        let epsilon_cp: f64 = f.get("loss.epsilon_cp", DEFAULT_EPSILON_CP)?;

        let d = TrainConfig::default();
        let augment = match f.raw("train.augment") {
            None => d.augment,
            Some(v) => parse_bool(&v)?,
        };
        let crop_size = match f.raw("train.crop_size").as_deref() {
            None | Some("auto") => None,
            Some(v) => Some(
                v.parse()
                    .map_err(|_| Error::Config(format!("train.crop_size: cannot parse `{v}`")))?,
            ),
        };
        let train = TrainConfig {
            base_lr: f.get("train.base_lr", d.base_lr)?,
            head_lr_mult: f.get("train.head_lr_mult", d.head_lr_mult)?,
            max_iterations: f.get("train.max_iterations", d.max_iterations)?,
            warmup_iterations: f.get("train.warmup_iterations", d.warmup_iterations)?,
            poly_power: f.get("train.poly_power", d.poly_power)?,
            batch_size: f.get("train.batch_size", d.batch_size)?,
            dp_start,
            seed: f.get("train.seed", d.seed)?,
            eval_interval: f.get("train.eval_interval", d.eval_interval)?,
            log_interval: f.get("train.log_interval", d.log_interval)?,
            weight_decay: f.get("train.weight_decay", d.weight_decay)?,
            beta1: f.get("train.beta1", d.beta1)?,
            beta2: f.get("train.beta2", d.beta2)?,
            adam_eps: f.get("train.adam_eps", d.adam_eps)?,
            augment,
            scale_min: f.get("train.scale_min", d.scale_min)?,
            scale_max: f.get("train.scale_max", d.scale_max)?,
            flip_prob: f.get("train.flip_prob", d.flip_prob)?,
            crop_size,
        };

        let source_kind = f.raw("data.source").unwrap_or_else(|| "synthetic".into());
        // generator keys are always read so a synthetic config can be pointed
        // at a directory with a single override
        let synthetic = DataSource::Synthetic {
            num_pairs: f.get("data.num_pairs", 128)?,
            size: f.get("data.size", 64)?,
            changed_ratio: f.get("data.changed_ratio", 0.5)?,
            seed: f.get("data.seed", 0)?,
            max_objects: f.get("data.max_objects", 3)?,
        };
        let source = match source_kind.as_str() {
            "synthetic" => synthetic,
            "directory" => DataSource::Directory {
                root: PathBuf::from(
                    f.raw("data.root")
                        .ok_or_else(|| Error::Config("data.source = directory needs data.root".into()))?,
                ),
            },
            s => return Err(Error::Config(format!("data.source must be synthetic or directory, got `{s}`"))),
        };
        let data = DataConfig {
            source,
            train_split: f.get("data.train_split", crate::data::Split::Train)?,
            eval_split: f.get("data.eval_split", crate::data::Split::Val)?,
        };
        let output_dir = PathBuf::from(f.raw("output.dir").unwrap_or_else(|| "runs/default".into()));
        f.finish()?;

        let model = ModelConfig {
            mode,
            difference,
            encoder,
            cam,
            dp,
            lg,
            epsilon_cp,
        };
        model.check()?;
        train.check()?;
        Ok(Self {
            model,
            encoder_init,
            encoder_preset: preset,
            train,
            data,
            output_dir,
        })
    }

    pub fn load(path: &std::path::Path, overrides: &[(String, String)]) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, overrides)
    }

    /// Every key with its effective value, in the same format [`RunConfig::parse`] reads.
    pub fn to_ini(&self) -> String {
        fn list<T: ToString>(v: &[T]) -> String {
            v.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
        }
        let m = &self.model;
        let e = &m.encoder;
        let t = &self.train;
        let mut s = String::new();
        let stream = match m.difference.placement {
            Placement::Early => "single",
            Placement::Late => "dual",
        };
        let _ = writeln!(s, "[model]\nmode = {}\nstream = {stream}\ndifference = {}\nencoder = {}\n", m.mode, m.difference.kind, self.encoder_preset);
        let init = self
            .encoder_init
            .as_ref()
            .map_or("random".to_string(), |p| p.display().to_string());
        let _ = writeln!(
            s,
            "[encoder]\nembed_dims = {}\ndepths = {}\nheads = {}\nmlp_ratio = {:?}\nattention_reduction = {}\ndrop_rate = {:?}\npatch_strides = {}\ninit = {init}\n",
            list(&e.embed_dims),
            list(&e.depths),
            list(&e.heads),
            e.mlp_ratio,
            list(&e.attention_reduction),
            e.drop_rate,
            list(&e.patch_strides)
        );
        let scales: Vec<String> = m.cam.scales.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(
            s,
            "[cam]\nscales = {}\neps_norm = {:?}\ntau = {:?}\n",
            scales.join(", "),
            m.cam.eps_norm,
            m.cam.tau
        );
        let _ = writeln!(
            s,
            "[dp]\nrates = {}\nbranch_channels = {}\nstart_iteration = {}\n",
            list(&m.dp.rates),
            m.dp.branch_channels,
            t.dp_start
        );
        let _ = writeln!(
            s,
            "[lg]\nalpha = {:?}\nmode = {}\nmask_source = {}\n",
            m.lg.alpha, m.lg.mode, m.lg.mask_source
        );
        let _ = writeln!(s, "[loss]\nepsilon_cp = {:?}\n", m.epsilon_cp);
        let crop = t.crop_size.map_or("auto".to_string(), |c| c.to_string());
        let _ = writeln!(
            s,
            "[train]\nbase_lr = {:?}\nhead_lr_mult = {:?}\nmax_iterations = {}\nwarmup_iterations = {}\npoly_power = {:?}\nbatch_size = {}\nseed = {}\neval_interval = {}\nlog_interval = {}\nweight_decay = {:?}\nbeta1 = {:?}\nbeta2 = {:?}\nadam_eps = {:?}\naugment = {}\nscale_min = {:?}\nscale_max = {:?}\nflip_prob = {:?}\ncrop_size = {crop}\n",
            t.base_lr,
            t.head_lr_mult,
            t.max_iterations,
            t.warmup_iterations,
            t.poly_power,
            t.batch_size,
            t.seed,
            t.eval_interval,
            t.log_interval,
            t.weight_decay,
            t.beta1,
            t.beta2,
            t.adam_eps,
            t.augment,
            t.scale_min,
            t.scale_max,
            t.flip_prob
        );
        match &self.data.source {
            DataSource::Synthetic {
                num_pairs,
                size,
                changed_ratio,
                seed,
                max_objects,
            } => {
                let _ = writeln!(
                    s,
                    "[data]\nsource = synthetic\nnum_pairs = {num_pairs}\nsize = {size}\nchanged_ratio = {changed_ratio:?}\nseed = {seed}\nmax_objects = {max_objects}"
                );
            }
            DataSource::Directory { root } => {
                let _ = writeln!(s, "[data]\nsource = directory\nroot = {}", root.display());
            }
        }
        let _ = writeln!(
            s,
            "train_split = {}\neval_split = {}\n",
            self.data.train_split, self.data.eval_split
        );
        let _ = writeln!(s, "[output]\ndir = {}", self.output_dir.display());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_round_trip() {
        let cfg = RunConfig::parse("", &[]).unwrap();
        assert_eq!(cfg.model.mode, Mode::TranswcdDl);
        assert_eq!(cfg.model.lg.alpha, 0.2);
        assert_eq!(cfg.train.base_lr, 5e-5);
        assert_eq!(cfg.train.dp_start, 2000);
        let again = RunConfig::parse(&cfg.to_ini(), &[]).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn mode_dependent_lg_defaults() {
        let cfg = RunConfig::parse("[model]\nmode = transwcd_l\n", &[]).unwrap();
        assert_eq!(cfg.model.lg.alpha, 0.5);
        assert_eq!(cfg.model.lg.mask_source, MaskSource::Init);
        assert!(RunConfig::parse("[model]\nmode = transwcd_l\n[lg]\nmask_source = final\n", &[]).is_err());
    }

    #[test]
    fn overrides_and_errors() {
        let o = vec![parse_override("dp.rates=[1, 2, 3, 4]").unwrap(), parse_override("lg.alpha=1.0").unwrap()];
        let cfg = RunConfig::parse("[dp]\nrates = 0,1,2,3\n", &o).unwrap();
        assert_eq!(cfg.model.dp.rates, vec![1, 2, 3, 4]);
        assert_eq!(cfg.model.lg.alpha, 1.0);
        assert!(RunConfig::parse("[train]\nbogus = 1\n", &[]).is_err());
        assert!(RunConfig::parse("[lg]\nalpha = 1.5\n", &[]).is_err());
        assert!(RunConfig::parse("[model]\nstream = single\ndifference = conv3x3_relu\n", &[]).is_err());
        assert!(RunConfig::parse("alpha = 1\n", &[]).is_err());
        assert!(parse_override("alpha=1").is_err());
    }

    #[test]
    fn synthetic_config_switches_to_directory() {
        let text = "[data]\nsource = synthetic\nnum_pairs = 32\nchanged_ratio = 0.25\n";
        let o = vec![
            parse_override("data.source=directory").unwrap(),
            parse_override("data.root=/tmp/pairs").unwrap(),
        ];
        let cfg = RunConfig::parse(text, &o).unwrap();
        assert_eq!(cfg.data.source, DataSource::Directory { root: "/tmp/pairs".into() });
        // generator keys are still validated
        assert!(RunConfig::parse("[data]\nsource = directory\nroot = x\nnum_pairs = many\n", &[]).is_err());
    }
}
