use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::victor::VictorConfig;

/// Multiply-adds of an `[m×k]·[k×n]` product, counted as two operations.
pub fn dense_flops(m: u64, k: u64, n: u64) -> u64 {
    2 * m * k * n
}

/// Percent fewer operations of `a` relative to `b`.
pub fn compare_flops(a: f64, b: f64) -> f64 {
    (1.0 - a / b) * 100.0
}

/// Per-instance operation counts of one model configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsLedger {
    /// Forward-pass count per component.
    pub components: BTreeMap<String, u64>,
    pub forward: u64,
    /// Forward plus backward, taken as three forward passes.
    pub training: u64,
    /// Tokens seen by the decoder (items plus the regression token).
    pub tokens: u64,
}

/// Analytic count for one outfit at `max_items` garments. Products cost
/// `2·m·k·n`; each elementwise stage (bias add, activation, residual add,
/// normalization step) costs one operation per element. Layer norm is five
/// stages (centre, square, scale, gain, shift); softmax is three (exp, sum,
/// divide).
pub fn count_flops(cfg: &VictorConfig) -> FlopsLedger {
    let n = cfg.max_items as u64;
    let t = n + 1;
    let (d, f, inp, hid, heads) = (
        cfg.d_model as u64,
        cfg.ffn_dim() as u64,
        cfg.input_dim() as u64,
        cfg.ocr_hidden() as u64,
        cfg.heads as u64,
    );
    let layers = cfg.layers as u64;
    let ln = |rows: u64| 5 * rows * d;
    let mut c = BTreeMap::new();
    c.insert("input_proj".to_string(), dense_flops(t - 1, inp, d) + (t - 1) * d);
    c.insert("layer_norm".to_string(), layers * 2 * ln(t));
    c.insert("qkv_proj".to_string(), layers * 3 * (dense_flops(t, d, d) + t * d));
    c.insert("attention_scores".to_string(), layers * dense_flops(t, d, t));
    c.insert("softmax".to_string(), layers * 3 * heads * t * t);
    c.insert("attention_values".to_string(), layers * dense_flops(t, t, d));
    c.insert("out_proj".to_string(), layers * (dense_flops(t, d, d) + t * d));
    c.insert(
        "ffn".to_string(),
        layers * (dense_flops(t, d, f) + t * f + t * f + dense_flops(t, f, d) + t * d),
    );
    c.insert("residual".to_string(), layers * 2 * t * d);
    c.insert(
        "ocr_head".to_string(),
        ln(1) + dense_flops(1, d, hid) + 2 * hid + dense_flops(1, hid, 1) + 2,
    );
    c.insert("mid_head".to_string(), ln(n) + n * d + dense_flops(n, d, 1) + 2 * n);
    let forward: u64 = c.values().sum();
    FlopsLedger { components: c, forward, training: 3 * forward, tokens: t }
}

/// One row of the published efficiency table: parameter count and
/// per-instance FLOPs of feature pre-training, the transformer on cached
/// features, their sum, and end-to-end fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsRow {
    pub model: &'static str,
    pub parameters: f64,
    pub flip: f64,
    pub victor: f64,
    pub flip_plus_victor: f64,
    pub e2e: f64,
    /// Reduction as printed in the table.
    pub published: f64,
}

impl FlopsRow {
    /// Reduction recomputed from the row's own FLOP columns.
    pub fn reduction(&self) -> f64 {
        compare_flops(self.flip_plus_victor, self.e2e)
    }
}

pub fn efficiency_rows() -> Vec<FlopsRow> {
    vec![
        FlopsRow { model: "ResNet18", parameters: 1.14e7, flip: 5.36e9, victor: 1.82e8, flip_plus_victor: 5.54e9, e2e: 4.55e10, published: 87.8 },
        FlopsRow { model: "EfficientNetV2-B3", parameters: 1.30e7, flip: 6.07e9, victor: 1.55e9, flip_plus_victor: 7.63e9, e2e: 6.02e10, published: 87.3 },
        FlopsRow { model: "MLP-Mixer B/16", parameters: 5.93e7, flip: 7.31e9, victor: 4.00e8, flip_plus_victor: 7.71e9, e2e: 2.40e11, published: 96.8 },
        FlopsRow { model: "ViT B/32", parameters: 8.76e7, flip: 1.56e10, victor: 4.00e8, flip_plus_victor: 1.60e10, e2e: 8.26e10, published: 80.62 },
    ]
}
