use serde::Serialize;

use crate::grad::GradientRecord;

/// Cosine similarity with a flag for zero-norm operands, which report 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Cosine {
    pub value: f64,
    pub degenerate: bool,
}

impl Cosine {
    pub fn between<'a>(
        a: impl IntoIterator<Item = &'a f64>,
        b: impl IntoIterator<Item = &'a f64>,
    ) -> Self {
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for (x, y) in a.into_iter().zip(b) {
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        if na == 0.0 || nb == 0.0 {
            return Self {
                value: 0.0,
                degenerate: true,
            };
        }
        Self {
            value: (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0),
            degenerate: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CosineReport {
    pub per_layer: Vec<Cosine>,
    pub model: Cosine,
}

pub fn cosine_per_layer(a: &GradientRecord, b: &GradientRecord) -> Vec<Cosine> {
    a.layers
        .iter()
        .zip(&b.layers)
        .map(|(x, y)| Cosine::between(x.iter(), y.iter()))
        .collect()
}

pub fn cosine_model_wide(a: &GradientRecord, b: &GradientRecord) -> Cosine {
    Cosine::between(
        a.layers.iter().flat_map(|l| l.iter()),
        b.layers.iter().flat_map(|l| l.iter()),
    )
}

pub fn cosine_similarity(a: &GradientRecord, b: &GradientRecord) -> CosineReport {
    CosineReport {
        per_layer: cosine_per_layer(a, b),
        model: cosine_model_wide(a, b),
    }
}
