use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::train::{cross_validate, write_report};
use super::TrainConfig;
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::metrics::{MeanStd, MetricsReport};

/// The stepwise model variants, in order of added components.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    /// Backbone with skip connections and unweighted loss.
    Unet,
    /// Backbone with the balance-weighted loss.
    Unetw,
    /// Fusion stream with CFF and tiny U-Net only.
    Cf2c,
    Cf2cAspp,
    Cf2cAsppEc,
    /// Everything, plus the superpixel input channel.
    Cf2netFull,
}

/// Config fields a variant controls. Every other field comes from the base
/// configuration unchanged.
pub const TOGGLE_FIELDS: [&str; 6] = [
    "model.use_fsp",
    "model.use_aspp",
    "model.use_ec",
    "model.use_superpixel",
    "model.backbone_skips",
    "loss.balanced",
];

impl AblationVariant {
    pub const ALL: [AblationVariant; 6] = [
        AblationVariant::Unet,
        AblationVariant::Unetw,
        AblationVariant::Cf2c,
        AblationVariant::Cf2cAspp,
        AblationVariant::Cf2cAsppEc,
        AblationVariant::Cf2netFull,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Unet => "unet",
            AblationVariant::Unetw => "unetw",
            AblationVariant::Cf2c => "cf2c",
            AblationVariant::Cf2cAspp => "cf2c_aspp",
            AblationVariant::Cf2cAsppEc => "cf2c_aspp_ec",
            AblationVariant::Cf2netFull => "cf2net_full",
        }
    }

    /// Row label in the comparison tables.
    pub fn display_name(self) -> &'static str {
        match self {
            AblationVariant::Unet => "U-Net",
            AblationVariant::Unetw => "U-NetW",
            AblationVariant::Cf2c => "CF²-Net-C",
            AblationVariant::Cf2cAspp => "CF²-Net-C + ASPP",
            AblationVariant::Cf2cAsppEc => "CF²-Net-C + ASPP + EC",
            AblationVariant::Cf2netFull => "CF²-Net",
        }
    }

    /// Values of [`TOGGLE_FIELDS`], in that order.
    pub fn toggles(self) -> [bool; 6] {
        use AblationVariant::*;
        let fsp = !matches!(self, Unet | Unetw);
        [
            fsp,
            matches!(self, Cf2cAspp | Cf2cAsppEc | Cf2netFull),
            matches!(self, Cf2cAsppEc | Cf2netFull),
            self == Cf2netFull,
            !fsp,
            self != Unet,
        ]
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let [fsp, aspp, ec, sp, skips, balanced] = self.toggles();
        let mut c = base.clone();
        c.model.use_fsp = fsp;
        c.model.use_aspp = aspp;
        c.model.use_ec = ec;
        c.model.use_superpixel = sp;
        c.model.backbone_skips = skips;
        c.loss.balanced = balanced;
        c
    }

    /// Fields whose values differ between the two variants.
    pub fn toggle_diff(self, other: AblationVariant) -> BTreeSet<String> {
        TOGGLE_FIELDS
            .iter()
            .zip(self.toggles().iter().zip(other.toggles()))
            .filter(|(_, (a, b))| *a != b)
            .map(|(f, _)| f.to_string())
            .collect()
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = AblationVariant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant {s:?}; expected one of {names:?}"))
            })
    }
}

impl std::fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Dotted paths of every leaf that differs between two configurations.
pub fn config_diff(a: &TrainConfig, b: &TrainConfig) -> Result<BTreeSet<String>> {
    fn walk(
        prefix: &str,
        a: &serde_json::Value,
        b: &serde_json::Value,
        out: &mut BTreeSet<String>,
    ) {
        use serde_json::Value::Object;
        match (a, b) {
            (Object(x), Object(y)) => {
                let keys: BTreeSet<&String> = x.keys().chain(y.keys()).collect();
                for k in keys {
                    let path = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    let null = serde_json::Value::Null;
                    walk(
                        &path,
                        x.get(k).unwrap_or(&null),
                        y.get(k).unwrap_or(&null),
                        out,
                    );
                }
            }
            _ if a != b => {
                out.insert(prefix.to_string());
            }
            _ => {}
        }
    }
    let mut out = BTreeSet::new();
    walk(
        "",
        &serde_json::to_value(a)?,
        &serde_json::to_value(b)?,
        &mut out,
    );
    Ok(out)
}

pub struct AblationReport {
    pub rows: Vec<(AblationVariant, MetricsReport)>,
}

fn pct(m: MeanStd) -> String {
    format!("{:.3}±{:.3}", 100.0 * m.mean, 100.0 * m.std)
}

fn caption_line(caption: &str) -> String {
    let mut c = caption.to_string();
    if let Some(f) = c.get_mut(0..1) {
        f.make_ascii_uppercase();
    }
    c
}

fn mark(on: bool) -> &'static str {
    if on {
        "√"
    } else {
        "×"
    }
}

impl AblationReport {
    fn get(&self, v: AblationVariant) -> Option<&MetricsReport> {
        self.rows.iter().find(|(r, _)| *r == v).map(|(_, m)| m)
    }

    /// The four stepwise comparisons, each printed when any of its rows ran,
    /// followed by the DSC/SEN/PPV deltas between consecutive rows.
    pub fn to_table(&self) -> String {
        use AblationVariant::*;
        let tables: [(&str, &str, &[AblationVariant]); 4] = [
            ("loss", "balance-weighted loss", &[Unet, Unetw]),
            ("fusion", "fusion stream (CFF + tiny U-Net)", &[Unetw, Cf2c]),
            ("units", "ASPP and EC units", &[Cf2c, Cf2cAspp, Cf2cAsppEc]),
            ("superpixel", "superpixel input", &[Cf2cAsppEc, Cf2netFull]),
        ];
        let mut out = String::new();
        for (title, caption, variants) in tables {
            let rows: Vec<_> = variants
                .iter()
                .filter_map(|&v| self.get(v).map(|r| (v, r)))
                .collect();
            if rows.is_empty() {
                continue;
            }
            let _ = writeln!(out, "{}", caption_line(caption));
            let lead = match title {
                "units" => format!("{:<6}{:<6}", "ASPP", "EC"),
                "superpixel" => format!("{:<13}", "Super-pixel"),
                _ => format!("{:<24}", "Model"),
            };
            let _ = writeln!(
                out,
                "{lead}{:<18}{:<18}{:<18}",
                "DSC(%)", "SEN(%)", "PPV(%)"
            );
            for (v, r) in &rows {
                let [_, aspp, ec, sp, _, _] = v.toggles();
                let lead = match title {
                    "units" => format!("{:<6}{:<6}", mark(aspp), mark(ec)),
                    "superpixel" => format!("{:<13}", mark(sp)),
                    _ => format!("{:<24}", v.display_name()),
                };
                let s = &r.summary;
                let _ = writeln!(
                    out,
                    "{lead}{:<18}{:<18}{:<18}",
                    pct(s.dsc),
                    pct(s.sen),
                    pct(s.ppv)
                );
            }
            for pair in rows.windows(2) {
                let (a, b) = (&pair[0].1.summary, &pair[1].1.summary);
                let _ = writeln!(
                    out,
                    "  Δ {} → {}: DSC {:+.3}, SEN {:+.3}, PPV {:+.3}",
                    pair[0].0,
                    pair[1].0,
                    100.0 * (b.dsc.mean - a.dsc.mean),
                    100.0 * (b.sen.mean - a.sen.mean),
                    100.0 * (b.ppv.mean - a.ppv.mean)
                );
            }
            out.push('\n');
        }
        out
    }

    /// One JSON object per variant with its summary.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for (v, r) in &self.rows {
            let line = serde_json::json!({
                "variant": v.name(),
                "summary": r.summary,
                "per_fold": r.per_fold,
                "metadata": r.metadata,
            });
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Cross-validate each variant with only its toggles changed. Variant `v`
/// writes under `out/<v>/`; the combined tables go to
/// `out/ablation.txt` and `out/ablation.jsonl`.
pub fn run_ablation(
    base: &TrainConfig,
    variants: &[AblationVariant],
    samples: &[Sample],
    out: Option<&Path>,
) -> Result<AblationReport> {
    if variants.is_empty() {
        return Err(Error::Config("no ablation variants requested".into()));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for &v in variants {
        let config = v.apply(base);
        log::info!("ablation variant {v}");
        let dir = out.map(|d| d.join(v.name()));
        if let Some(d) = &dir {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            let p = d.join("config.json");
            std::fs::write(&p, serde_json::to_string_pretty(&config)?)
                .map_err(|e| Error::io(&p, e))?;
        }
        let mut cv = cross_validate(&config, samples, dir.as_deref())?;
        cv.report.metadata.insert("variant".into(), v.name().into());
        rows.push((v, cv.report));
    }
    let report = AblationReport { rows };
    if let Some(d) = out {
        for (v, r) in &report.rows {
            write_report(&d.join(v.name()), "report", r)?;
        }
        let t = d.join("ablation.txt");
        std::fs::write(&t, report.to_table()).map_err(|e| Error::io(&t, e))?;
        let j = d.join("ablation.jsonl");
        std::fs::write(&j, report.to_jsonl()?).map_err(|e| Error::io(&j, e))?;
    }
    Ok(report)
}
