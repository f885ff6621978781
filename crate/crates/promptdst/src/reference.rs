//! Static reference tables: published results for the two pipeline stages
//! and external baselines, shipped for report footers. These are reporting
//! fixtures, not recomputed quantities.

/// One row of the BERT-MLM domain-prediction grid: data distribution
/// (p1..p4), full accuracy, partial accuracy, and full accuracy with the
/// domain count known beforehand.
pub struct MlmGridRow {
    pub dist: [f64; 4],
    pub full: f64,
    pub partial: f64,
    pub pre_known: f64,
}

/// BERT-MLM full/partial accuracy across data distributions, 128 examples.
/// The first row is the zero-shot reference.
pub const MLM_DISTRIBUTION_GRID: [MlmGridRow; 7] = [
    MlmGridRow { dist: [0.0, 0.0, 0.0, 0.0], full: 0.36, partial: 0.60, pre_known: 0.45 },
    MlmGridRow { dist: [0.4, 0.3, 0.2, 0.1], full: 0.47, partial: 0.70, pre_known: 0.71 },
    MlmGridRow { dist: [0.35, 0.35, 0.15, 0.15], full: 0.47, partial: 0.70, pre_known: 0.69 },
    MlmGridRow { dist: [0.25, 0.25, 0.25, 0.25], full: 0.43, partial: 0.68, pre_known: 0.73 },
    MlmGridRow { dist: [0.2, 0.2, 0.3, 0.3], full: 0.41, partial: 0.67, pre_known: 0.72 },
    MlmGridRow { dist: [0.15, 0.15, 0.35, 0.35], full: 0.42, partial: 0.67, pre_known: 0.74 },
    MlmGridRow { dist: [0.1, 0.2, 0.3, 0.4], full: 0.33, partial: 0.63, pre_known: 0.75 },
];

/// One row of the GPT-2 causal-LM grid: plain NLL vs unlikelihood-trained.
/// `None` where the configuration was not run.
pub struct ClmGridRow {
    pub dist: [f64; 4],
    pub full: f64,
    pub partial: f64,
    pub full_ul: Option<f64>,
    pub partial_ul: Option<f64>,
}

pub const CLM_DISTRIBUTION_GRID: [ClmGridRow; 7] = [
    ClmGridRow { dist: [0.0, 0.0, 0.0, 0.0], full: 0.21, partial: 0.28, full_ul: None, partial_ul: None },
    ClmGridRow { dist: [0.4, 0.3, 0.2, 0.1], full: 0.46, partial: 0.66, full_ul: Some(0.47), partial_ul: Some(0.67) },
    ClmGridRow { dist: [0.35, 0.35, 0.15, 0.15], full: 0.46, partial: 0.66, full_ul: Some(0.49), partial_ul: Some(0.69) },
    ClmGridRow { dist: [0.25, 0.25, 0.25, 0.25], full: 0.48, partial: 0.68, full_ul: Some(0.46), partial_ul: Some(0.67) },
    ClmGridRow { dist: [0.2, 0.2, 0.3, 0.3], full: 0.43, partial: 0.64, full_ul: Some(0.42), partial_ul: Some(0.65) },
    ClmGridRow { dist: [0.15, 0.15, 0.35, 0.35], full: 0.41, partial: 0.61, full_ul: Some(0.35), partial_ul: Some(0.60) },
    ClmGridRow { dist: [0.1, 0.2, 0.3, 0.4], full: 0.36, partial: 0.59, full_ul: Some(0.31), partial_ul: Some(0.57) },
];

/// Domain-prediction accuracy vs dataset size at the fixed best
/// distribution: (size, clm_ul_full, clm_ul_partial, mlm_full, mlm_partial).
pub const SIZE_GRID: [(usize, f64, f64, f64, f64); 5] = [
    (16, 0.20, 0.28, 0.33, 0.60),
    (32, 0.20, 0.29, 0.30, 0.59),
    (64, 0.28, 0.45, 0.37, 0.64),
    (128, 0.49, 0.69, 0.47, 0.70),
    (256, 0.44, 0.65, 0.47, 0.73),
];

/// Slot-value accuracy vs data-per-slot:
/// (model, per_slot, total, strict, flexible).
pub const SLOT_VALUE_GRID: [(&str, usize, usize, f64, f64); 12] = [
    ("gpt2", 0, 0, 0.025, 0.048),
    ("gpt2", 3, 54, 0.062, 0.086),
    ("gpt2", 5, 80, 0.109, 0.132),
    ("gpt2", 7, 125, 0.164, 0.180),
    ("t5", 0, 0, 0.288, 0.311),
    ("t5", 3, 54, 0.300, 0.314),
    ("t5", 5, 80, 0.343, 0.361),
    ("t5", 7, 125, 0.256, 0.259),
    ("gpt-neo", 0, 0, 0.056, 0.059),
    ("gpt-neo", 3, 54, 0.432, 0.432),
    ("gpt-neo", 5, 80, 0.417, 0.425),
    ("gpt-neo", 7, 125, 0.440, 0.446),
];

/// End-to-end combined-system results:
/// (domain model, slot model, subset, turn/slot accuracy, joint accuracy).
pub const COMBINED_SYSTEMS: [(&str, &str, &str, f64, f64); 4] = [
    ("gpt2-lm", "t5", "multi-domain", 0.56, 0.01),
    ("gpt2-lm", "t5", "single-domain", 0.58, 0.02),
    ("bert-mlm", "t5", "multi-domain", 0.51, 0.00),
    ("bert-mlm", "t5", "single-domain", 0.61, 0.02),
];

/// Few-shot comparison point: the best retrieval-augmented few-shot
/// baseline on the single-domain subset reaches roughly this joint/slot
/// accuracy, against this pipeline's 0.02/0.61.
pub const FEW_SHOT_BASELINE: (&str, f64, f64) = ("few-shot-bot", 0.02, 0.61);

/// Fully fine-tuned baselines for the report footer, with their published
/// MultiWOZ joint goal accuracies.
pub const FINETUNED_BASELINES: [(&str, f64); 4] = [
    ("glad", 0.3557),
    ("sumbt", 0.4665),
    ("trade", 0.4862),
    ("dstqa", 0.5117),
];

/// Footer text appended to evaluation reports.
pub fn reference_footer() -> String {
    let mut out = String::from("# reference: combined systems (turn_acc, joint_acc)\n");
    for (dp, svp, subset, turn, joint) in COMBINED_SYSTEMS {
        out.push_str(&format!("# {dp}+{svp} [{subset}]: {turn}, {joint}\n"));
    }
    out.push_str("# reference: fine-tuned baselines (joint goal accuracy)\n");
    for (name, joint) in FINETUNED_BASELINES {
        out.push_str(&format!("# {name}: {joint}\n"));
    }
    out
}
