//! Objective ablations: retrain the adapter with chosen loss terms zeroed
//! or with a different attack step, then measure what each variant buys.
//!
//! Every row is self-contained: it trains a fresh adapter from the same
//! seed and data, replays the test split under both variants with the
//! frozen auditor, and reports per-detector AUROC/accuracy shifts.

use serde::{Deserialize, Serialize};

use crate::data::benchmark::LabeledExample;
use crate::data::ood::UnlabeledExample;
use crate::detectors::DetectorKind;
use crate::error::Result;
use crate::eval::auroc;
use crate::eval::replay::{score_traces, trace_examples, FittedAuditor};
use crate::eval::report::MetricShift;
use crate::eval::threshold::{operating_point, CalibrationSource};
use crate::model::adapter::AdapterConfig;
use crate::model::params::Params;
use crate::telemetry::ModelVariant;
use crate::trainer::{train_corvus, CorvusConfig};

/// Which telemetry terms stay in the objective, and the attack step.
/// Cross-entropy is always on; a disabled term's coefficient becomes
/// exactly zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub name: String,
    pub te: bool,
    pub hv: bool,
    pub ad: bool,
    pub epsilon: f64,
}

impl AblationSpec {
    pub fn new(name: &str, te: bool, hv: bool, ad: bool, epsilon: f64) -> Self {
        AblationSpec { name: name.to_string(), te, hv, ad, epsilon }
    }

    /// Pins the spec onto a shared training config. Seed, data ordering,
    /// optimizer settings and band all come from `base`.
    pub fn apply(&self, base: &CorvusConfig) -> CorvusConfig {
        let mut cfg = base.clone();
        if !self.te {
            cfg.beta_te = 0.0;
        }
        if !self.hv {
            cfg.beta_hv = 0.0;
        }
        if !self.ad {
            cfg.lambda_adv = 0.0;
        }
        cfg.epsilon = self.epsilon;
        cfg
    }
}

/// The standard battery: the full objective, each term alone, the
/// no-attack variant, and an attack-step sweep around the default.
pub fn standard_specs(default_epsilon: f64) -> Vec<AblationSpec> {
    vec![
        AblationSpec::new("all", true, true, true, default_epsilon),
        AblationSpec::new("te_only", true, false, false, default_epsilon),
        AblationSpec::new("hv_only", false, true, false, default_epsilon),
        AblationSpec::new("ad_only", false, false, true, default_epsilon),
        AblationSpec::new("no_fgsm", true, true, true, 0.0),
        AblationSpec::new("eps_1.5e-3", true, true, true, 1.5e-3),
        AblationSpec::new("eps_5e-3", true, true, true, 5e-3),
    ]
}

/// Per-detector shifts for one trained variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationDelta {
    pub detector: DetectorKind,
    pub auroc: MetricShift,
    /// At the auditor's frozen accuracy threshold.
    pub accuracy: MetricShift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub spec: AblationSpec,
    pub adapter_hash: String,
    pub deltas: Vec<AblationDelta>,
}

impl AblationRow {
    pub fn delta_for(&self, kind: DetectorKind) -> &AblationDelta {
        let idx = DetectorKind::ALL.iter().position(|&k| k == kind).unwrap();
        &self.deltas[idx]
    }
}

/// Trains one ablation variant and measures it. `base_cfg` carries the
/// pinned seed and shared hyperparameters; only the spec's fields differ
/// between rows.
pub fn ablation_run(
    params: &Params,
    instructions: &[UnlabeledExample],
    adapter_cfg: AdapterConfig,
    base_cfg: &CorvusConfig,
    spec: &AblationSpec,
    auditor: &FittedAuditor,
    test: &[LabeledExample],
) -> Result<AblationRow> {
    let cfg = spec.apply(base_cfg);
    let (adapter, _log) = train_corvus(params, instructions, adapter_cfg, &cfg)?;

    let clean_traces = trace_examples(params, None, test)?;
    let adapted_traces = trace_examples(params, Some(&adapter), test)?;
    let labels: Vec<bool> = clean_traces.iter().map(|t| t.hallucinated).collect();
    let clean_rows = score_traces(auditor, &clean_traces, ModelVariant::Clean)?;
    let adapted_rows = score_traces(auditor, &adapted_traces, ModelVariant::Adapted)?;

    let mut deltas = Vec::with_capacity(DetectorKind::ALL.len());
    for (j, kind) in DetectorKind::ALL.into_iter().enumerate() {
        let fit = auditor.fit_for(kind);
        let clean: Vec<f64> =
            clean_rows.iter().map(|r| fit.orientation.apply(r.scores[j])).collect();
        let attacked: Vec<f64> =
            adapted_rows.iter().map(|r| fit.orientation.apply(r.scores[j])).collect();
        let acc_clean =
            operating_point(&clean, &labels, fit.threshold_acc, CalibrationSource::CleanValidation)?;
        let acc_attacked = operating_point(
            &attacked,
            &labels,
            fit.threshold_acc,
            CalibrationSource::CleanValidation,
        )?;
        deltas.push(AblationDelta {
            detector: kind,
            auroc: MetricShift::new(auroc(&clean, &labels)?, auroc(&attacked, &labels)?),
            accuracy: MetricShift::new(acc_clean.accuracy, acc_attacked.accuracy),
        });
    }
    Ok(AblationRow { spec: spec.clone(), adapter_hash: adapter.content_hash(), deltas })
}

/// Aligned text table, one column block per row: ΔAUROC / Δaccuracy for
/// every detector.
pub fn render_ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    out.push_str("Ablation deltas (attacked minus clean)\n");
    let name_w = rows
        .iter()
        .map(|r| r.spec.name.len())
        .chain(["variant".len()])
        .max()
        .unwrap_or(8);
    out.push_str(&format!("{:<name_w$}", "variant"));
    for kind in DetectorKind::ALL {
        out.push_str(&format!("  {:>18}", kind.name()));
    }
    out.push('\n');
    for row in rows {
        out.push_str(&format!("{:<name_w$}", row.spec.name));
        for d in &row.deltas {
            out.push_str(&format!(
                "  {:>18}",
                format!("{:+.3}/{:+.3}", d.auroc.delta, d.accuracy.delta)
            ));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_zeroes_only_disabled_terms() {
        let base = CorvusConfig::default();
        let cfg = AblationSpec::new("ad_only", false, false, true, base.epsilon).apply(&base);
        assert_eq!(cfg.beta_te, 0.0);
        assert_eq!(cfg.beta_hv, 0.0);
        assert_eq!(cfg.lambda_adv, base.lambda_adv);
        assert_eq!(cfg.seed, base.seed);
        assert_eq!(cfg.learning_rate, base.learning_rate);

        let off = AblationSpec::new("ce_only", false, false, false, 0.0).apply(&base);
        assert_eq!(off.beta_te, 0.0);
        assert_eq!(off.beta_hv, 0.0);
        assert_eq!(off.lambda_adv, 0.0);
        assert_eq!(off.epsilon, 0.0);
    }

    #[test]
    fn standard_battery_covers_terms_and_sweep() {
        let specs = standard_specs(1e-2);
        let names: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
        assert!(names.contains(&"all"));
        assert!(names.contains(&"ad_only"));
        assert!(names.contains(&"te_only"));
        assert!(names.contains(&"no_fgsm"));
        let no_fgsm = specs.iter().find(|s| s.name == "no_fgsm").unwrap();
        assert_eq!(no_fgsm.epsilon, 0.0);
        assert!(no_fgsm.te && no_fgsm.hv && no_fgsm.ad);
        assert!(specs.iter().any(|s| s.epsilon == 1.5e-3));
    }

    #[test]
    fn table_renders_every_variant() {
        let rows: Vec<AblationRow> = standard_specs(1e-2)
            .into_iter()
            .map(|spec| AblationRow {
                spec,
                adapter_hash: "h".into(),
                deltas: DetectorKind::ALL
                    .into_iter()
                    .map(|detector| AblationDelta {
                        detector,
                        auroc: MetricShift::new(0.8, 0.7),
                        accuracy: MetricShift::new(0.75, 0.6),
                    })
                    .collect(),
            })
            .collect();
        let table = render_ablation_table(&rows);
        for spec in standard_specs(1e-2) {
            assert!(table.contains(&spec.name), "{table}");
        }
        assert!(table.contains("-0.100"));
    }
}
