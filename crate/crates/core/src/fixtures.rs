//! Reference constants from the published shared-task results: corpus class
//! counts, submission metrics, cross-validated baselines and the best
//! ensemble's composition. Values are percentages unless noted.

use crate::corpus::ClassCounts;
use crate::evaluation::ReportedRow;

/// Class counts of the causal news corpus splits.
pub const TRAIN_COUNTS: ClassCounts = ClassCounts {
    positive: 1603,
    negative: 1322,
};
pub const DEV_COUNTS: ClassCounts = ClassCounts {
    positive: 178,
    negative: 145,
};
pub const TEST_COUNTS: ClassCounts = ClassCounts {
    positive: 176,
    negative: 135,
};

/// Precision, recall, accuracy and F1 of one submission on one split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubmissionScores {
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Submission {
    pub name: &'static str,
    pub dev: SubmissionScores,
    pub test: SubmissionScores,
}

const fn s(precision: f64, recall: f64, accuracy: f64, f1: f64) -> SubmissionScores {
    SubmissionScores {
        precision,
        recall,
        accuracy,
        f1,
    }
}

pub const SUBMISSIONS: [Submission; 5] = [
    Submission {
        name: "Ensemble-10m",
        dev: s(88.46, 90.45, 88.26, 89.44),
        test: s(82.78, 84.66, 81.35, 83.70),
    },
    Submission {
        name: "Prompt-256",
        dev: s(85.49, 92.70, 87.30, 88.95),
        test: s(82.80, 87.50, 82.64, 85.08),
    },
    Submission {
        name: "Prompt-356e",
        dev: s(82.72, 88.76, 83.60, 85.63),
        test: s(80.41, 88.64, 81.35, 84.32),
    },
    Submission {
        name: "Prompt-1000",
        dev: s(84.56, 91.57, 86.07, 87.87),
        test: s(81.08, 85.22, 80.39, 83.10),
    },
    Submission {
        name: "Ensemble-8p",
        dev: s(86.10, 90.44, 86.69, 88.22),
        test: s(81.15, 88.07, 81.67, 84.47),
    },
];

/// All ten (submission, split) precision/recall/F1 triples.
pub fn submission_rows() -> Vec<ReportedRow> {
    SUBMISSIONS
        .iter()
        .flat_map(|sub| {
            [("dev", sub.dev), ("test", sub.test)]
                .into_iter()
                .map(move |(split, m)| ReportedRow::new(format!("{} {split}", sub.name), m.precision, m.recall, m.f1))
        })
        .collect()
}

/// Mean ± std over five folds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reported {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineRow {
    pub model: &'static str,
    pub precision: Reported,
    pub recall: Reported,
    pub accuracy: Reported,
    pub f1: Reported,
}

const fn r(mean: f64, std: f64) -> Reported {
    Reported { mean, std }
}

/// Five-fold cross-validated standard fine-tuning on the training split.
pub const KFOLD_BASELINES: [BaselineRow; 6] = [
    BaselineRow {
        model: "bert-base-cased",
        precision: r(83.52, 1.01),
        recall: r(87.88, 3.08),
        accuracy: r(79.68, 1.83),
        f1: r(81.03, 1.20),
    },
    BaselineRow {
        model: "bart-base",
        precision: r(84.21, 0.88),
        recall: r(87.80, 2.26),
        accuracy: r(80.99, 2.19),
        f1: r(81.98, 0.95),
    },
    BaselineRow {
        model: "roberta-base",
        precision: r(85.13, 1.11),
        recall: r(87.86, 2.41),
        accuracy: r(82.66, 2.35),
        f1: r(83.21, 1.10),
    },
    BaselineRow {
        model: "distilroberta-base",
        precision: r(84.41, 1.20),
        recall: r(88.05, 1.69),
        accuracy: r(81.12, 2.09),
        f1: r(82.22, 1.12),
    },
    BaselineRow {
        model: "deberta-base",
        precision: r(82.67, 2.76),
        recall: r(85.74, 2.72),
        accuracy: r(80.32, 6.49),
        f1: r(80.31, 3.44),
    },
    BaselineRow {
        model: "deberta-v3-base",
        precision: r(85.87, 1.18),
        recall: r(88.88, 1.74),
        accuracy: r(83.18, 3.16),
        f1: r(84.00, 1.18),
    },
];

/// Dev F1 of the best single fine-tuned checkpoint per architecture and of
/// the fused ensemble built from them.
pub const SINGLE_MODEL_DEV_F1: [(&str, f64); 3] = [
    ("bert-base-cased", 85.15),
    ("roberta-base", 86.76),
    ("deberta-v3-base", 89.69),
];
pub const FUSED_ENSEMBLE_DEV_F1: f64 = 89.7;

/// Member count per architecture in the best fused ensemble (10 members).
pub const ENSEMBLE_COMPOSITION: [(&str, usize); 3] =
    [("deberta-v3-base", 6), ("bert-base-cased", 2), ("roberta-base", 2)];

/// Prompt templates behind the prompt-based submissions.
pub const TEMPLATE_NOT: &str = "[x] This is not [MASK]";
pub const TEMPLATE_NO_ITIES: &str = "[x] There were no [MASK]ities in this";
pub const TEMPLATE_INCIDENT: &str = "[x] The incident is not [MASK]";

/// (template, k, d) of each prompt-based model; the three-model vote uses k = 356.
pub const PROMPT_256: (&str, usize, usize) = (TEMPLATE_NOT, 256, 3);
pub const PROMPT_1000: (&str, usize, usize) = (TEMPLATE_NO_ITIES, 1000, 1);
pub const VOTE_356: [(&str, usize, usize); 3] = [
    (TEMPLATE_NO_ITIES, 356, 2),
    (TEMPLATE_NO_ITIES, 356, 3),
    (TEMPLATE_INCIDENT, 356, 1),
];
