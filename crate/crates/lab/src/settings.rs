//! Resolved training configuration and the ablation -> wiring map.

use mpn_core::losses::FsaKind;
use mpn_core::model::{Mode, MpnConfig};

use crate::config::Config;
use crate::corpus::PriorKind;
use crate::error::{contract_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SharedLayer {
    Conv1,
    Conv2,
}

/// One cell of the ablation matrix; names follow the study's component
/// table plus the feature-alignment and soft-sharing variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Baseline,
    MtOnly,
    NaiveMtl,
    PsaC1,
    PsaC2,
    PsaBoth,
    /// Feature alignment without parameter sharing.
    Fsa(FsaKind),
    /// Parameter sharing plus the chosen feature-alignment kind.
    MpnO(FsaKind),
    /// Parameter sharing + class-wise alignment + channel attention.
    Mpn,
    SoftShare(SharedLayer),
}

impl Ablation {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "baseline" => Ablation::Baseline,
            "mt_only" => Ablation::MtOnly,
            "naive_mtl" => Ablation::NaiveMtl,
            "psa_c1" => Ablation::PsaC1,
            "psa_c2" => Ablation::PsaC2,
            "psa_both" => Ablation::PsaBoth,
            "fsa_only" => Ablation::Fsa(FsaKind::ClassWise),
            "fsa_sample" => Ablation::Fsa(FsaKind::SampleWise),
            "fsa_batch" => Ablation::Fsa(FsaKind::BatchWise),
            "fsa_summed" => Ablation::Fsa(FsaKind::SummedTriplet),
            "mpn_o" => Ablation::MpnO(FsaKind::ClassWise),
            "mpn_o_sample" => Ablation::MpnO(FsaKind::SampleWise),
            "mpn_o_batch" => Ablation::MpnO(FsaKind::BatchWise),
            "mpn_o_summed" => Ablation::MpnO(FsaKind::SummedTriplet),
            "mpn" => Ablation::Mpn,
            "soft_c1" => Ablation::SoftShare(SharedLayer::Conv1),
            "soft_c2" => Ablation::SoftShare(SharedLayer::Conv2),
            other => return Err(contract_err!("unknown ablation mode {:?}", other)),
        })
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Ablation::Baseline => "baseline",
            Ablation::MtOnly => "mt_only",
            Ablation::NaiveMtl => "naive_mtl",
            Ablation::PsaC1 => "psa_c1",
            Ablation::PsaC2 => "psa_c2",
            Ablation::PsaBoth => "psa_both",
            Ablation::Fsa(FsaKind::ClassWise) => "fsa_only",
            Ablation::Fsa(FsaKind::SampleWise) => "fsa_sample",
            Ablation::Fsa(FsaKind::BatchWise) => "fsa_batch",
            Ablation::Fsa(FsaKind::SummedTriplet) => "fsa_summed",
            Ablation::Fsa(FsaKind::None) => "naive_mtl",
            Ablation::MpnO(FsaKind::ClassWise) => "mpn_o",
            Ablation::MpnO(FsaKind::SampleWise) => "mpn_o_sample",
            Ablation::MpnO(FsaKind::BatchWise) => "mpn_o_batch",
            Ablation::MpnO(FsaKind::SummedTriplet) => "mpn_o_summed",
            Ablation::MpnO(FsaKind::None) => "psa_both",
            Ablation::Mpn => "mpn",
            Ablation::SoftShare(SharedLayer::Conv1) => "soft_c1",
            Ablation::SoftShare(SharedLayer::Conv2) => "soft_c2",
        }
    }

    /// (mode, share_conv1, share_conv2, share_ca, use_ca, fsa, soft layer)
    pub fn wiring(&self) -> (Mode, bool, bool, bool, bool, FsaKind, Option<SharedLayer>) {
        match *self {
            Ablation::Baseline => (Mode::Baseline, false, false, false, false, FsaKind::None, None),
            Ablation::MtOnly => (Mode::MtOnly, false, false, false, false, FsaKind::None, None),
            Ablation::NaiveMtl => (Mode::NaiveMtl, false, false, false, false, FsaKind::None, None),
            Ablation::PsaC1 => (Mode::Full, true, false, false, false, FsaKind::None, None),
            Ablation::PsaC2 => (Mode::Full, false, true, false, false, FsaKind::None, None),
            Ablation::PsaBoth => (Mode::Full, true, true, false, false, FsaKind::None, None),
            Ablation::Fsa(kind) => (Mode::NaiveMtl, false, false, false, false, kind, None),
            Ablation::MpnO(kind) => (Mode::Full, true, true, false, false, kind, None),
            Ablation::Mpn => (Mode::Full, true, true, true, true, FsaKind::ClassWise, None),
            Ablation::SoftShare(layer) => {
                (Mode::NaiveMtl, false, false, false, false, FsaKind::None, Some(layer))
            }
        }
    }

    /// Component flags for the ablation table: (MTL, C1-S, C2-S, CF, CA).
    pub fn components(&self) -> (bool, bool, bool, bool, bool) {
        let (mode, c1, c2, _, ca, fsa, _) = self.wiring();
        let mtl = matches!(mode, Mode::NaiveMtl | Mode::Full);
        (mtl, c1, c2, !matches!(fsa, FsaKind::None), ca)
    }
}

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_step: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub s: usize,
    pub a: usize,
    pub margin: f64,
    pub lambda: f64,
    pub k: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub prior: PriorKind,
    pub feature_dim: usize,
    pub ca_reduction: usize,
    pub backbone_widths: Vec<usize>,
    pub backbone_strides: Vec<usize>,
    pub holdout_frac: f64,
    pub eval_every: usize,
    pub soft_share_weight: f64,
    pub erase_prob: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 70,
            lr: 0.01,
            lr_decay: 0.1,
            lr_step: 20,
            momentum: 0.9,
            weight_decay: 5e-4,
            s: 6,
            a: 8,
            margin: 0.2,
            lambda: 1.0,
            k: 6,
            seed: 1,
            ablation: Ablation::Mpn,
            prior: PriorKind::Coarse,
            feature_dim: 512,
            ca_reduction: 16,
            backbone_widths: vec![32, 64, 128, 256],
            backbone_strides: vec![2, 2, 1, 1],
            holdout_frac: 0.25,
            eval_every: 1,
            soft_share_weight: 1.0,
            erase_prob: 0.5,
        }
    }
}

pub const TRAIN_KEYS: [&str; 22] = [
    "epochs",
    "lr",
    "lr_decay",
    "lr_step",
    "momentum",
    "weight_decay",
    "s",
    "a",
    "margin",
    "lambda",
    "k",
    "seed",
    "ablation",
    "prior",
    "feature_dim",
    "ca_reduction",
    "backbone_widths",
    "backbone_strides",
    "holdout_frac",
    "eval_every",
    "soft_share_weight",
    "erase_prob",
];

impl TrainSettings {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        cfg.ensure_known_keys(&TRAIN_KEYS)?;
        let d = TrainSettings::default();
        let settings = TrainSettings {
            epochs: cfg.parse_or("epochs", d.epochs)?,
            lr: cfg.parse_or("lr", d.lr)?,
            lr_decay: cfg.parse_or("lr_decay", d.lr_decay)?,
            lr_step: cfg.parse_or("lr_step", d.lr_step)?,
            momentum: cfg.parse_or("momentum", d.momentum)?,
            weight_decay: cfg.parse_or("weight_decay", d.weight_decay)?,
            s: cfg.parse_or("s", d.s)?,
            a: cfg.parse_or("a", d.a)?,
            margin: cfg.parse_or("margin", d.margin)?,
            lambda: cfg.parse_or("lambda", d.lambda)?,
            k: cfg.parse_or("k", d.k)?,
            seed: cfg.parse_or("seed", d.seed)?,
            ablation: Ablation::parse(cfg.get("ablation").unwrap_or("mpn"))?,
            prior: PriorKind::parse(cfg.get("prior").unwrap_or("coarse"))?,
            feature_dim: cfg.parse_or("feature_dim", d.feature_dim)?,
            ca_reduction: cfg.parse_or("ca_reduction", d.ca_reduction)?,
            backbone_widths: cfg.parse_list_or("backbone_widths", &d.backbone_widths)?,
            backbone_strides: cfg.parse_list_or("backbone_strides", &d.backbone_strides)?,
            holdout_frac: cfg.parse_or("holdout_frac", d.holdout_frac)?,
            eval_every: cfg.parse_or("eval_every", d.eval_every)?,
            soft_share_weight: cfg.parse_or("soft_share_weight", d.soft_share_weight)?,
            erase_prob: cfg.parse_or("erase_prob", d.erase_prob)?,
        };
        if settings.epochs == 0 || settings.s == 0 || settings.a == 0 {
            return Err(contract_err!("epochs, s, and a must be positive"));
        }
        for (name, v) in [
            ("lr", settings.lr),
            ("lr_decay", settings.lr_decay),
            ("momentum", settings.momentum),
            ("margin", settings.margin),
        ] {
            if v < 0.0 {
                return Err(contract_err!("{} must be non-negative, got {}", name, v));
            }
        }
        Ok(settings)
    }

    pub fn model_config(&self, num_classes: usize, input_h: usize, input_w: usize) -> MpnConfig {
        let (mode, share_conv1, share_conv2, share_ca, use_ca, _, _) = self.ablation.wiring();
        MpnConfig {
            k: self.k,
            feature_dim: self.feature_dim,
            use_ca,
            share_conv1,
            share_conv2,
            share_ca,
            mode,
            num_classes,
            ca_reduction: self.ca_reduction,
            backbone_widths: self.backbone_widths.clone(),
            backbone_strides: self.backbone_strides.clone(),
            input_h,
            input_w,
        }
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        let widths: Vec<String> = self.backbone_widths.iter().map(|w| w.to_string()).collect();
        let strides: Vec<String> = self.backbone_strides.iter().map(|s| s.to_string()).collect();
        vec![
            ("epochs".into(), self.epochs.to_string()),
            ("lr".into(), self.lr.to_string()),
            ("lr_decay".into(), self.lr_decay.to_string()),
            ("lr_step".into(), self.lr_step.to_string()),
            ("momentum".into(), self.momentum.to_string()),
            ("weight_decay".into(), self.weight_decay.to_string()),
            ("s".into(), self.s.to_string()),
            ("a".into(), self.a.to_string()),
            ("margin".into(), self.margin.to_string()),
            ("lambda".into(), self.lambda.to_string()),
            ("k".into(), self.k.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("ablation".into(), self.ablation.as_str().to_string()),
            ("prior".into(), self.prior.as_str().to_string()),
            ("feature_dim".into(), self.feature_dim.to_string()),
            ("ca_reduction".into(), self.ca_reduction.to_string()),
            ("backbone_widths".into(), widths.join(",")),
            ("backbone_strides".into(), strides.join(",")),
            ("holdout_frac".into(), self.holdout_frac.to_string()),
            ("eval_every".into(), self.eval_every.to_string()),
            ("soft_share_weight".into(), self.soft_share_weight.to_string()),
            ("erase_prob".into(), self.erase_prob.to_string()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_names_roundtrip() {
        for name in [
            "baseline", "mt_only", "naive_mtl", "psa_c1", "psa_c2", "psa_both", "fsa_only",
            "fsa_sample", "fsa_batch", "fsa_summed", "mpn_o", "mpn_o_sample", "mpn_o_batch",
            "mpn_o_summed", "mpn", "soft_c1", "soft_c2",
        ] {
            assert_eq!(Ablation::parse(name).unwrap().as_str(), name);
        }
        assert!(Ablation::parse("bogus").is_err());
    }

    #[test]
    fn component_flags_follow_the_table() {
        assert_eq!(Ablation::Baseline.components(), (false, false, false, false, false));
        assert_eq!(Ablation::NaiveMtl.components(), (true, false, false, false, false));
        assert_eq!(Ablation::PsaC1.components(), (true, true, false, false, false));
        assert_eq!(
            Ablation::Fsa(FsaKind::ClassWise).components(),
            (true, false, false, true, false)
        );
        assert_eq!(
            Ablation::MpnO(FsaKind::ClassWise).components(),
            (true, true, true, true, false)
        );
        assert_eq!(Ablation::Mpn.components(), (true, true, true, true, true));
    }
}
