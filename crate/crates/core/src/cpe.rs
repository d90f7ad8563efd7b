//! Contrastive patch embedding loss.
//!
//! The two feature cells with the most CAM mass (`u1`, `u2`) and the two with
//! the least (`v1`, `v2`) are contrasted with raw dot products:
//!
//! ```text
//! L = -ln( e^{u1·u2} / (e^{u1·u2} + Σ_ij e^{ui·vj}) )
//!     -ln( e^{v1·v2} / (e^{v1·v2} + Σ_ij e^{ui·vj}) )
//! ```
//!
//! No temperature and no normalization of the vectors.

use crate::autodiff::{stack, Tape, Var};
use crate::cam::rank_cells_desc;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Grid cells chosen for the loss, in `[u1, u2, v1, v2]` order.
pub type CellQuad = [(usize, usize); 4];

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSelection {
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
    pub v1: Vec<f64>,
    pub v2: Vec<f64>,
    pub cells: CellQuad,
}

/// Picks the two highest- and two lowest-scoring cells.
///
/// Cells are ranked by descending score with ties going to the lower
/// row-major index, so `u1, u2` are the first two in that order and
/// `v1, v2` the last and second-to-last.
pub fn select_cells(cell_scores: &Tensor) -> Result<CellQuad> {
    if cell_scores.rank() != 2 {
        return Err(Error::dim(format!("cell scores must be 2-D, got {:?}", cell_scores.shape())));
    }
    let n = cell_scores.len();
    if n < 4 {
        return Err(Error::contract(format!("need at least 4 cells, grid has {n}")));
    }
    let order = rank_cells_desc(cell_scores);
    Ok([order[0], order[1], order[n - 1], order[n - 2]])
}

/// Selects the four embedding vectors from a row-major list of `G·G` cells.
pub fn select_patches(embedding_grid: &[Vec<f64>], cell_scores: &Tensor) -> Result<PatchSelection> {
    if embedding_grid.len() != cell_scores.len() {
        return Err(Error::dim(format!(
            "{} embeddings for {} cell scores",
            embedding_grid.len(),
            cell_scores.len()
        )));
    }
    let cells = select_cells(cell_scores)?;
    let cols = cell_scores.shape()[1];
    let pick = |(i, j): (usize, usize)| embedding_grid[i * cols + j].clone();
    Ok(PatchSelection {
        u1: pick(cells[0]),
        u2: pick(cells[1]),
        v1: pick(cells[2]),
        v2: pick(cells[3]),
        cells,
    })
}

/// Records the loss on the tape of its operands.
pub fn cpe_loss_var<'t>(u1: Var<'t>, u2: Var<'t>, v1: Var<'t>, v2: Var<'t>) -> Result<Var<'t>> {
    let pos = u1.dot(u2)?;
    let neg = v1.dot(v2)?;
    let cross = [u1.dot(v1)?, u1.dot(v2)?, u2.dot(v1)?, u2.dot(v2)?];
    // -ln(e^p / (e^p + Σ e^c)) = ln(1 + Σ e^{c - p}), which stays positive
    // when the cross terms are negligible.
    let term = |anchor: Var<'t>| -> Result<Var<'t>> {
        let shifted = cross.iter().map(|c| c.sub(anchor)).collect::<Result<Vec<_>>>()?;
        stack(&shifted)?.log1p_sum_exp()
    };
    term(pos)?.add(term(neg)?)
}

/// Loss over the selected cells of a recorded `1×C×G×G` feature map.
pub fn cpe_loss_on_map<'t>(feature_map: Var<'t>, cells: &CellQuad) -> Result<Var<'t>> {
    let [a, b, c, d] = cells.map(|(i, j)| feature_map.select_cell(i, j));
    cpe_loss_var(a?, b?, c?, d?)
}

fn check_selection(sel: &PatchSelection) -> Result<()> {
    let dim = sel.u1.len();
    for v in [&sel.u1, &sel.u2, &sel.v1, &sel.v2] {
        if v.len() != dim {
            return Err(Error::dim("patch vectors differ in length"));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::contract("patch vectors must be finite"));
        }
    }
    Ok(())
}

/// Loss value and its gradients with respect to `[u1, u2, v1, v2]`.
pub fn cpe_loss_with_grad(sel: &PatchSelection) -> Result<(f64, [Vec<f64>; 4])> {
    check_selection(sel)?;
    let tape = Tape::new();
    let vars = [&sel.u1, &sel.u2, &sel.v1, &sel.v2].map(|v| tape.param(Tensor::from_parts(vec![v.len()], v.clone())));
    let loss = cpe_loss_var(vars[0], vars[1], vars[2], vars[3])?;
    let grads = tape.backward(loss)?;
    Ok((loss.item(), vars.map(|v| grads.wrt(v).into_data())))
}

pub fn cpe_loss(sel: &PatchSelection) -> Result<f64> {
    cpe_loss_with_grad(sel).map(|(l, _)| l)
}
