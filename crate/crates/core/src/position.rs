//! Positional-label heads: absolute patch positions, relative pair offsets,
//! and the joint classification + position objective.
//!
//! Both heads read only the patch rows `z_1..z_N` of the encoder output;
//! the class-token row never enters a position loss.

use rand::seq::index;

use crate::config::ModelConfig;
use crate::encoder::{grid_coords, init_shapes, linear};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bindings, ParamSet};
use crate::rng::Rng;

pub const APL_PREFIX: &str = "apl_head";
pub const RPL_PREFIX: &str = "rpl_head";

/// Maps 2-D patch offsets `(Δr, Δc)` to 1-D relative-position classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelativeIndexTable {
    pub rows: usize,
    pub cols: usize,
}

impl RelativeIndexTable {
    pub fn new(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "grid extents must be positive");
        RelativeIndexTable { rows, cols }
    }

    pub fn num_classes(&self) -> usize {
        (2 * self.rows - 1) * (2 * self.cols - 1)
    }

    /// `(Δr + rows − 1)·(2·cols − 1) + (Δc + cols − 1)`
    pub fn index(&self, dr: isize, dc: isize) -> Result<usize> {
        let (rows, cols) = (self.rows as isize, self.cols as isize);
        if dr.abs() >= rows || dc.abs() >= cols {
            return Err(Error::Index(format!(
                "offset ({dr}, {dc}) outside a {}×{} grid",
                self.rows, self.cols
            )));
        }
        Ok(((dr + rows - 1) * (2 * cols - 1) + (dc + cols - 1)) as usize)
    }

    /// Class of the offset from raster position `from` to raster position `to`.
    pub fn between(&self, from: usize, to: usize) -> Result<usize> {
        let (ri, ci) = grid_coords(from, self.cols);
        let (rj, cj) = grid_coords(to, self.cols);
        self.index(rj as isize - ri as isize, cj as isize - ci as isize)
    }

    pub fn offset(&self, class: usize) -> Result<(isize, isize)> {
        if class >= self.num_classes() {
            return Err(Error::Index(format!("class {class} ≥ {}", self.num_classes())));
        }
        let width = 2 * self.cols - 1;
        let dr = (class / width) as isize - (self.rows as isize - 1);
        let dc = (class % width) as isize - (self.cols as isize - 1);
        Ok((dr, dc))
    }
}

/// Raster-order absolute labels `0..rows·cols`.
pub fn absolute_targets(grid: (usize, usize)) -> Vec<usize> {
    (0..grid.0 * grid.1).collect()
}

/// `D → D → d` GELU MLP followed by a `d × classes` linear classifier.
pub fn head_shapes(prefix: &str, d_model: usize, d_pos: usize, classes: usize) -> Vec<(String, Vec<usize>)> {
    vec![
        (format!("{prefix}.fc1.weight"), vec![d_model, d_model]),
        (format!("{prefix}.fc1.bias"), vec![d_model]),
        (format!("{prefix}.fc2.weight"), vec![d_model, d_pos]),
        (format!("{prefix}.fc2.bias"), vec![d_pos]),
        (format!("{prefix}.classifier"), vec![d_pos, classes]),
    ]
}

/// Shapes of every head enabled by `cfg.head_mode`.
pub fn position_head_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut shapes = Vec::new();
    if cfg.head_mode.absolute() {
        shapes.extend(head_shapes(APL_PREFIX, cfg.embed_dim, cfg.pos_dim, cfg.num_patches()));
    }
    if cfg.head_mode.relative() {
        shapes.extend(head_shapes(RPL_PREFIX, cfg.embed_dim, cfg.pos_dim, cfg.relative_classes()));
    }
    shapes
}

/// Adds the enabled position heads to `params` (zero classifier, zero biases).
pub fn init_position_heads(params: &mut ParamSet, cfg: &ModelConfig, seed: u64) {
    init_shapes(params, seed, &position_head_shapes(cfg));
}

/// A position loss with the logits and targets it was computed from.
#[derive(Debug, Clone)]
pub struct PositionOutput {
    pub loss: Var,
    pub logits: Var,
    pub targets: Vec<usize>,
}

fn head_var(b: &Bindings, prefix: &str, leaf: &str) -> Result<Var> {
    b.maybe(&format!("{prefix}.{leaf}"))
        .ok_or_else(|| Error::Mode(format!("no `{prefix}` head is bound")))
}

fn check_classes(g: &Graph, classifier: Var, expected: usize, what: &str) -> Result<()> {
    let found = g.value(classifier).dims2()?.1;
    if found != expected {
        return Err(Error::Mode(format!("{what} head has {found} classes, expected {expected}")));
    }
    Ok(())
}

/// Patch rows of `z` (the class token at row 0 is skipped).
fn patch_rows(g: &mut Graph, z: Var) -> Result<Var> {
    let rows = g.value(z).dims2()?.0;
    if rows < 2 {
        return Err(Error::dim("encoder output holds no patch rows"));
    }
    g.slice(z, 0, 1, rows - 1)
}

/// Absolute positional label loss: every patch row `z_i` is classified
/// into its raster position `positions[i]` out of `num_positions` classes.
pub fn absolute_position_loss(
    g: &mut Graph,
    b: &Bindings,
    z: Var,
    positions: &[usize],
    num_positions: usize,
) -> Result<PositionOutput> {
    let classifier = head_var(b, APL_PREFIX, "classifier")?;
    check_classes(g, classifier, num_positions, "absolute")?;
    let zp = patch_rows(g, z)?;
    if g.shape(zp)[0] != positions.len() {
        return Err(Error::dim(format!(
            "{} patch rows but {} positions",
            g.shape(zp)[0],
            positions.len()
        )));
    }
    let h = linear(g, b, &format!("{APL_PREFIX}.fc1"), zp)?;
    let h = g.gelu(h)?;
    let p = linear(g, b, &format!("{APL_PREFIX}.fc2"), h)?;
    let logits = g.matmul(p, classifier)?;
    let loss = g.cross_entropy(logits, positions)?;
    Ok(PositionOutput { loss, logits, targets: positions.to_vec() })
}

/// `concat(first half of z_i, first half of z_j)` for token rows `i`, `j` (1-based patch rows).
pub fn pair_features(g: &mut Graph, z: Var, i: usize, j: usize) -> Result<Var> {
    let (rows, d) = g.value(z).dims2()?;
    if d % 2 != 0 {
        return Err(Error::dim(format!("pair features need an even width, got {d}")));
    }
    if i == 0 || j == 0 || i >= rows || j >= rows {
        return Err(Error::Index(format!("pair ({i}, {j}) outside patch rows 1..{}", rows - 1)));
    }
    let zi = g.slice(z, 0, i, 1)?;
    let zj = g.slice(z, 0, j, 1)?;
    let hi = g.slice(zi, 1, 0, d / 2)?;
    let hj = g.slice(zj, 1, 0, d / 2)?;
    g.concat(&[hi, hj], 1)
}

/// Ordered pairs `(i, j)` of patch-row indices (0-based within the patch
/// rows): all `n²` of them, or a uniform sample of `budget` without replacement.
pub fn sample_pairs(n: usize, budget: Option<usize>, rng: &mut Rng) -> Vec<(usize, usize)> {
    let total = n * n;
    match budget {
        Some(k) if k < total => {
            let mut picks = index::sample(rng, total, k).into_vec();
            picks.sort_unstable();
            picks.into_iter().map(|p| (p / n, p % n)).collect()
        }
        _ => (0..total).map(|p| (p / n, p % n)).collect(),
    }
}

/// Relative positional label loss over ordered patch pairs.
///
/// The first MLP layer acts on `concat(½z_i, ½z_j)`; it is evaluated as
/// `½z_i·W_top + ½z_j·W_bottom`, which avoids materialising the pair matrix.
pub fn relative_position_loss(
    g: &mut Graph,
    b: &Bindings,
    z: Var,
    positions: &[usize],
    table: &RelativeIndexTable,
    pair_budget: Option<usize>,
    rng: &mut Rng,
) -> Result<PositionOutput> {
    let classifier = head_var(b, RPL_PREFIX, "classifier")?;
    check_classes(g, classifier, table.num_classes(), "relative")?;
    let zp = patch_rows(g, z)?;
    let (n, d) = g.value(zp).dims2()?;
    if n != positions.len() {
        return Err(Error::dim(format!("{n} patch rows but {} positions", positions.len())));
    }
    if d % 2 != 0 {
        return Err(Error::dim(format!("pair features need an even width, got {d}")));
    }
    let pairs = sample_pairs(n, pair_budget, rng);
    let targets = pairs
        .iter()
        .map(|&(i, j)| table.between(positions[i], positions[j]))
        .collect::<Result<Vec<_>>>()?;
    let (left, right): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();

    let half = g.slice(zp, 1, 0, d / 2)?;
    let w1 = head_var(b, RPL_PREFIX, "fc1.weight")?;
    let w_top = g.slice(w1, 0, 0, d / 2)?;
    let w_bottom = g.slice(w1, 0, d / 2, d / 2)?;
    let a = g.matmul(half, w_top)?;
    let c = g.matmul(half, w_bottom)?;
    let a = g.gather_rows(a, &left)?;
    let c = g.gather_rows(c, &right)?;
    let h = g.add(a, c)?;
    let h = g.add_bias(h, head_var(b, RPL_PREFIX, "fc1.bias")?)?;
    let h = g.gelu(h)?;
    let p = linear(g, b, &format!("{RPL_PREFIX}.fc2"), h)?;
    let logits = g.matmul(p, classifier)?;
    let loss = g.cross_entropy(logits, &targets)?;
    Ok(PositionOutput { loss, logits, targets })
}

/// `L = L_s + λ·L_p`
pub fn joint_loss(g: &mut Graph, ls: Var, lp: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    let weighted = g.scale(lp, lambda)?;
    g.add(ls, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::tensor::Tensor;

    #[test]
    fn absolute_targets_are_raster_order() {
        assert_eq!(absolute_targets((3, 3)), (0..9).collect::<Vec<_>>());
        assert_eq!(absolute_targets((1, 1)), vec![0]);
        let t = absolute_targets((8, 8));
        assert_eq!(t.len(), 64);
        assert_eq!(*t.last().unwrap(), 63);
    }

    #[test]
    fn relative_index_corners() {
        let t = RelativeIndexTable::new(3, 3);
        assert_eq!(t.index(-2, -2).unwrap(), 0);
        assert_eq!(t.index(2, 2).unwrap(), 24);
        assert_eq!(t.index(0, 0).unwrap(), 12);
        assert_eq!(t.num_classes(), 25);
        assert!(matches!(t.index(3, 0), Err(Error::Index(_))));
        assert!(matches!(t.index(0, -3), Err(Error::Index(_))));
    }

    #[test]
    fn relative_offset_inverts_index() {
        let t = RelativeIndexTable::new(4, 6);
        for class in 0..t.num_classes() {
            let (dr, dc) = t.offset(class).unwrap();
            assert_eq!(t.index(dr, dc).unwrap(), class);
        }
        assert!(t.offset(t.num_classes()).is_err());
    }

    #[test]
    fn single_patch_grid_has_one_relative_class() {
        let t = RelativeIndexTable::new(1, 1);
        assert_eq!(t.num_classes(), 1);
        assert_eq!(t.between(0, 0).unwrap(), 0);
        let mut rng = stream(0, "pairs", &[]);
        assert_eq!(sample_pairs(1, None, &mut rng), vec![(0, 0)]);
    }

    #[test]
    fn pair_features_halves() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::from_fn(&[4, 6], |i| i as f64));
        let same = pair_features(&mut g, z, 2, 2).unwrap();
        let v = g.value(same).data().to_vec();
        assert_eq!(v.len(), 6);
        assert_eq!(v[..3], v[3..]);

        let ij = pair_features(&mut g, z, 1, 3).unwrap();
        let ji = pair_features(&mut g, z, 3, 1).unwrap();
        let (a, b) = (g.value(ij).data(), g.value(ji).data());
        assert_eq!(a[..3], b[3..]);
        assert_eq!(a[3..], b[..3]);
        assert_eq!(a, &[6.0, 7.0, 8.0, 18.0, 19.0, 20.0]);
        assert!(pair_features(&mut g, z, 0, 1).is_err());
    }

    #[test]
    fn pair_budget_samples_without_replacement() {
        let mut rng = stream(1, "pairs", &[]);
        let pairs = sample_pairs(8, Some(10), &mut rng);
        assert_eq!(pairs.len(), 10);
        let mut dedup = pairs.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), 10);
        assert_eq!(sample_pairs(3, Some(100), &mut rng).len(), 9);
    }

    #[test]
    fn joint_loss_arithmetic() {
        let mut g = Graph::new();
        let ls = g.constant(Tensor::scalar(2.0));
        let lp = g.constant(Tensor::scalar(4.0));
        let l = joint_loss(&mut g, ls, lp, 0.5).unwrap();
        assert_eq!(g.value(l).item(), 4.0);
        let l0 = joint_loss(&mut g, ls, lp, 0.0).unwrap();
        assert_eq!(g.value(l0).item(), 2.0);
        assert!(joint_loss(&mut g, ls, lp, -1.0).is_err());
    }

    #[test]
    fn mode_mismatch_is_reported() {
        let cfg = ModelConfig { head_mode: crate::config::HeadMode::Rpl, ..Default::default() };
        let mut p = ParamSet::new();
        init_position_heads(&mut p, &cfg, 0);
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let z = g.constant(Tensor::zeros(&[65, 64]));
        let positions = absolute_targets((8, 8));
        let r = absolute_position_loss(&mut g, &b, z, &positions, 64);
        assert!(matches!(r, Err(Error::Mode(_))));
        let wrong = RelativeIndexTable::new(4, 4);
        let mut rng = stream(0, "pairs", &[]);
        let r = relative_position_loss(&mut g, &b, z, &positions, &wrong, None, &mut rng);
        assert!(matches!(r, Err(Error::Mode(_))));
    }
}
