use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::data::Mask;
use crate::error::{Error, Result};
use crate::experiment::ExperimentConfig;
use crate::experiment::Workspace;
use crate::metrics::{accumulate_confusion, miou, ConfusionMatrix};
use crate::models::{segment_forward, Segmenter, IGNORE_LABEL};
use crate::tensor::Tensor;
use crate::tiling::{crop_window, plan_windows, stitch, WindowGrid};

const WINDOW_CHUNK: usize = 32;

/// Full-image class mask of a `3×H×W` normalized image by moving-window
/// inference.
pub fn predict_slide(seg: &Segmenter, store: &ParamStore, image: &Tensor, grid: &WindowGrid) -> Result<Mask> {
    let p = grid.patch;
    let mut blocks = Vec::with_capacity(grid.windows.len());
    for chunk in grid.windows.chunks(WINDOW_CHUNK) {
        let mut data = Vec::with_capacity(chunk.len() * 3 * p * p);
        for win in chunk {
            data.extend_from_slice(crop_window(image, grid, win)?.data());
        }
        let logits = segment_forward(seg, store, &Tensor::new([chunk.len(), 3, p, p], data)?)?;
        let (_, k, _, _) = logits.dims4()?;
        let per = k * p * p;
        for i in 0..chunk.len() {
            blocks.push(Tensor::new([k, p, p], logits.data()[i * per..(i + 1) * per].to_vec())?);
        }
    }
    stitch(grid, &blocks)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    /// Test mIoU per domain, one confusion matrix accumulated over all test
    /// slides.
    pub miou: Vec<f64>,
    /// mIoU of each domain's predictions against the reference domain's.
    pub concordance: Vec<f64>,
    pub confusion: Vec<ConfusionMatrix>,
}

/// Predicted masks `masks[slide][domain]` for the test split, in split order.
pub fn predict_test_split(
    seg: &Segmenter,
    store: &ParamStore,
    ws: &Workspace,
    config: &ExperimentConfig,
) -> Result<Vec<(usize, Vec<Mask>)>> {
    let size = ws.dataset.manifest.slide_size;
    let grid = plan_windows(size, size, config.patch_size, config.eval.overlap)?;
    let n_dom = ws.dataset.num_domains();
    ws.dataset
        .split()
        .test
        .iter()
        .map(|&id| {
            let masks = (0..n_dom)
                .map(|d| predict_slide(seg, store, ws.normalized(id, d)?, &grid))
                .collect::<Result<Vec<_>>>()?;
            Ok((id, masks))
        })
        .collect()
}

/// Per-domain test mIoU and concordance to the reference domain.
pub fn score_predictions(ws: &Workspace, predictions: &[(usize, Vec<Mask>)], classes: usize) -> Result<EvalOutcome> {
    let n_dom = ws.dataset.num_domains();
    let reference = ws.dataset.split().reference_domain;
    let mut confusion = vec![ConfusionMatrix::new(classes); n_dom];
    let mut agreement = vec![ConfusionMatrix::new(classes); n_dom];
    for (id, masks) in predictions {
        if masks.len() != n_dom {
            return Err(Error::Data(format!("slide {id} lacks predictions for some domains")));
        }
        let gt = ws.mask(*id)?;
        for d in 0..n_dom {
            accumulate_confusion(&mut confusion[d], &masks[d].labels, &gt.labels, Some(IGNORE_LABEL))?;
            accumulate_confusion(&mut agreement[d], &masks[d].labels, &masks[reference].labels, None)?;
        }
    }
    Ok(EvalOutcome {
        miou: confusion.iter().map(miou).collect::<Result<_>>()?,
        concordance: agreement.iter().map(miou).collect::<Result<_>>()?,
        confusion,
    })
}

pub fn run_eval(
    ws: &Workspace,
    config: &ExperimentConfig,
    seg: &Segmenter,
    store: &ParamStore,
) -> Result<(EvalOutcome, Vec<(usize, Vec<Mask>)>)> {
    let predictions = predict_test_split(seg, store, ws, config)?;
    let outcome = score_predictions(ws, &predictions, seg.config().num_classes)?;
    Ok((outcome, predictions))
}
