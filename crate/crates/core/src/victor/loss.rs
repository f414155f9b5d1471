use super::{BatchedOutfits, Outputs, TaskMode};
use crate::error::{Error, Result};
use crate::numeric::{Graph, Var};

/// The scalar loss node and the values of its terms.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub mse: Option<f64>,
    pub bce: Option<f64>,
}

/// MTL: `MSE(y_ocr, t_ocr) + α·BCE(y_mid, t_mid)` with the BCE averaged over
/// real garments only. OCr and MID keep one term each; OCb applies BCE to
/// `y_ocr` against binary outfit labels.
pub fn victor_loss(g: &mut Graph, out: &Outputs, batch: &BatchedOutfits, mode: TaskMode, alpha: f64) -> Result<LossParts> {
    match mode {
        TaskMode::OCr => {
            let mse = g.mse(out.y_ocr, &batch.t_ocr)?;
            Ok(LossParts { total: mse, mse: Some(g.value(mse).item()), bce: None })
        }
        TaskMode::MID => {
            let bce = g.masked_bce(out.y_mid, &batch.t_mid, &batch.pad_mask)?;
            Ok(LossParts { total: bce, mse: None, bce: Some(g.value(bce).item()) })
        }
        TaskMode::OCb => {
            if let Some(t) = batch.t_ocr.iter().find(|&&t| t != 0.0 && t != 1.0) {
                return Err(Error::Contract(format!("OCb training needs binary outfit labels, found t_ocr = {t}")));
            }
            let all = vec![true; batch.batch];
            let bce = g.masked_bce(out.y_ocr, &batch.t_ocr, &all)?;
            Ok(LossParts { total: bce, mse: None, bce: Some(g.value(bce).item()) })
        }
        TaskMode::MTL => {
            if !(alpha > 0.0) {
                return Err(Error::Config(format!("alpha must be positive in MTL mode, got {alpha}")));
            }
            let mse = g.mse(out.y_ocr, &batch.t_ocr)?;
            let bce = g.masked_bce(out.y_mid, &batch.t_mid, &batch.pad_mask)?;
            let weighted = g.scale(bce, alpha);
            let total = g.add(mse, weighted)?;
            Ok(LossParts { total, mse: Some(g.value(mse).item()), bce: Some(g.value(bce).item()) })
        }
    }
}
