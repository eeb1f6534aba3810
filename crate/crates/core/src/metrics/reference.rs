//! Published full-scale results, kept as reference targets.
//!
//! These come from ImageNet-pretrained backbones trained for 200 epochs on four GPUs
//! and cannot be reproduced with the tiny configurations. They are used only to print
//! context next to a report and for the directional comparison below.

use super::DatasetRow;

/// `(model, dataset, mDice)`.
pub const MDICE_TARGETS: [(&str, &str, f64); 12] = [
    ("fcbformer", "Kvasir", 0.9129),
    ("enformer-lite-mini", "Kvasir", 0.8974),
    ("enformer-lite-small", "Kvasir", 0.9113),
    ("enformer-lite-medium", "Kvasir", 0.9098),
    ("enformer-lite-large", "Kvasir", 0.9224),
    ("enformer", "Kvasir", 0.9059),
    ("fcbformer", "ETIS-LaribPolypDB", 0.7955),
    ("enformer-lite-mini", "ETIS-LaribPolypDB", 0.7601),
    ("enformer-lite-small", "ETIS-LaribPolypDB", 0.8258),
    ("enformer-lite-medium", "ETIS-LaribPolypDB", 0.7871),
    ("enformer-lite-large", "ETIS-LaribPolypDB", 0.7857),
    ("enformer", "ETIS-LaribPolypDB", 0.8406),
];

pub fn mdice_target(model: &str, dataset: &str) -> Option<f64> {
    MDICE_TARGETS
        .iter()
        .find(|(m, d, _)| *m == model && *d == dataset)
        .map(|t| t.2)
}

/// Whether EnFormer beats the FCBFormer assembly on ETIS mDice, as the published
/// ordering says it should. `None` unless both rows are present.
pub fn etis_ordering_holds(rows: &[DatasetRow]) -> Option<bool> {
    let find = |model: &str| {
        rows.iter()
            .find(|r| r.model == model && r.dataset == "ETIS-LaribPolypDB")
            .map(|r| r.mdice)
    };
    Some(find("enformer")? > find("fcbformer")?)
}
