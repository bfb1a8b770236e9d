//! Instance importance from class-token attention, and localization scores.

use std::path::Path;

use crate::config::AttentionMode;
use crate::data::Bag;
use crate::error::{Error, Result};
use crate::model::TimeMil;
use crate::pooling::NUM_BLOCKS;
use crate::tensor::Real;
use crate::trainer::predict;

#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceMap {
    pub bag_id: String,
    /// Class-token attention of each block over the valid instances.
    pub block_attention: [Vec<f64>; NUM_BLOCKS],
    /// Block mean, zero on padded steps; length `T`.
    pub importance: Vec<f64>,
    pub predicted: usize,
    pub true_class: usize,
}

/// Exact-attention importance of every time step, whatever mode the model
/// was trained with.
pub fn importance<F: Real>(model: &TimeMil<F>, bag: &Bag) -> Result<ImportanceMap> {
    let (logits, block_attention) = model.infer(bag, AttentionMode::Exact)?;
    let mut importance = vec![0.0; bag.t];
    for att in &block_attention {
        for (dst, a) in importance.iter_mut().zip(att) {
            *dst += a / NUM_BLOCKS as f64;
        }
    }
    Ok(ImportanceMap {
        bag_id: bag.id.clone(),
        block_attention,
        importance,
        predicted: predict(&logits),
        true_class: bag.label,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Localization {
    pub mass_in_window: f64,
    /// Share of the `k` most important steps inside the window, `k` being
    /// the window length.
    pub topk_precision: f64,
}

/// Scores an inclusive window `[start, end]`.
pub fn localization_score(map: &ImportanceMap, window: (usize, usize)) -> Result<Localization> {
    let (start, end) = window;
    let t = map.importance.len();
    if start > end || end >= t {
        return Err(Error::usage(format!("window [{start}, {end}] outside 0..{t}")));
    }
    let mass_in_window = map.importance[start..=end].iter().sum();
    let k = end - start + 1;
    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by(|&a, &b| map.importance[b].total_cmp(&map.importance[a]).then(a.cmp(&b)));
    let hits = order[..k].iter().filter(|&&i| (start..=end).contains(&i)).count();
    Ok(Localization {
        mass_in_window,
        topk_precision: hits as f64 / k as f64,
    })
}

/// One row per `(bag, t)`: `bag_id,t,x0..x{d-1},importance,predicted_class`.
pub fn export_importance_csv(items: &[(&Bag, &ImportanceMap)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let d = items.first().map_or(0, |(b, _)| b.d);
    if let Some((b, _)) = items.iter().find(|(b, m)| b.d != d || m.importance.len() != b.t) {
        return Err(Error::dim(format!("bag {} does not match the export layout", b.id)));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let mut header = vec!["bag_id".to_string(), "t".to_string()];
    header.extend((0..d).map(|c| format!("x{c}")));
    header.push("importance".into());
    header.push("predicted_class".into());
    w.write_record(&header)?;
    for (bag, map) in items {
        for t in 0..bag.t {
            let mut row = vec![bag.id.clone(), t.to_string()];
            row.extend((0..d).map(|c| bag.value(t, c).to_string()));
            row.push(map.importance[t].to_string());
            row.push(map.predicted.to_string());
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
