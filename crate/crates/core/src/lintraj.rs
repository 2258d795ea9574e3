//! Stacked linearized dynamics around a nominal trajectory.
//!
//! With `zeta = [d0_bar; d_0; ..; d_{T-1}]` the deviation from the nominal
//! trajectory is `F_u (du + K zeta) + F_zeta zeta`, where `F_zeta = [F_0, Fd]`.

use nalgebra::{DMatrix, DMatrixView, DVector};

use crate::error::{Error, Result};
use crate::models::{DynamicsModel, NominalTrajectory};

/// `Phi(k1, k2) = A_{k1-1} .. A_{k2}`, identity when `k1 == k2`.
pub fn transition(a_list: &[DMatrix<f64>], k1: usize, k2: usize) -> Result<DMatrix<f64>> {
    if k1 < k2 {
        return Err(Error::invalid(format!("transition({k1}, {k2}) needs k1 >= k2")));
    }
    if k1 > a_list.len() {
        return Err(Error::invalid(format!(
            "transition({k1}, {k2}) beyond horizon {}",
            a_list.len()
        )));
    }
    let n = a_list
        .first()
        .map(DMatrix::nrows)
        .ok_or_else(|| Error::invalid("empty Jacobian list"))?;
    let mut phi = DMatrix::identity(n, n);
    for a in &a_list[k2..k1] {
        phi = a * phi;
    }
    Ok(phi)
}

#[derive(Debug, Clone)]
pub struct StackedBlocks {
    n_x: usize,
    n_u: usize,
    horizon: usize,
    pub a_list: Vec<DMatrix<f64>>,
    pub b_list: Vec<DMatrix<f64>>,
    /// `(T+1) n_x x n_x`
    pub f0: DMatrix<f64>,
    /// `(T+1) n_x x T n_u`
    pub fu: DMatrix<f64>,
    /// `(T+1) n_x x T n_x`
    pub fd_tilde: DMatrix<f64>,
    /// `(T+1) n_x x (T+1) n_x`, equal to `[F_0, Fd]`
    pub fzeta: DMatrix<f64>,
}

impl StackedBlocks {
    pub fn build(a_list: Vec<DMatrix<f64>>, b_list: Vec<DMatrix<f64>>) -> Result<Self> {
        let horizon = a_list.len();
        if horizon == 0 || b_list.len() != horizon {
            return Err(Error::invalid(format!(
                "need equal nonzero numbers of A and B matrices, got {} and {}",
                a_list.len(),
                b_list.len()
            )));
        }
        let n_x = a_list[0].nrows();
        let n_u = b_list[0].ncols();
        if a_list.iter().any(|a| a.shape() != (n_x, n_x))
            || b_list.iter().any(|b| b.shape() != (n_x, n_u))
        {
            return Err(Error::invalid("inconsistent Jacobian dimensions"));
        }
        let rows = (horizon + 1) * n_x;
        let mut f0 = DMatrix::zeros(rows, n_x);
        let mut fu = DMatrix::zeros(rows, horizon * n_u);
        let mut fd_tilde = DMatrix::zeros(rows, horizon * n_x);

        let mut phi = DMatrix::identity(n_x, n_x);
        f0.view_mut((0, 0), (n_x, n_x)).copy_from(&phi);
        for (k, a) in a_list.iter().enumerate() {
            phi = a * phi;
            f0.view_mut(((k + 1) * n_x, 0), (n_x, n_x)).copy_from(&phi);
        }
        // column block j: inputs applied at step j first reach x_{j+1}
        for j in 0..horizon {
            let mut phi = DMatrix::identity(n_x, n_x);
            for k in (j + 1)..=horizon {
                if k > j + 1 {
                    phi = &a_list[k - 1] * phi;
                }
                fd_tilde.view_mut((k * n_x, j * n_x), (n_x, n_x)).copy_from(&phi);
                fu.view_mut((k * n_x, j * n_u), (n_x, n_u))
                    .copy_from(&(&phi * &b_list[j]));
            }
        }
        let mut fzeta = DMatrix::zeros(rows, rows);
        fzeta.view_mut((0, 0), (rows, n_x)).copy_from(&f0);
        fzeta.view_mut((0, n_x), (rows, horizon * n_x)).copy_from(&fd_tilde);
        Ok(Self { n_x, n_u, horizon, a_list, b_list, f0, fu, fd_tilde, fzeta })
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Rows of `F_u` belonging to state `x_k`; only the first `k` column
    /// blocks are nonzero.
    pub fn fu_rows(&self, k: usize) -> DMatrixView<'_, f64> {
        self.fu.view((k * self.n_x, 0), (self.n_x, self.horizon * self.n_u))
    }

    pub fn fzeta_rows(&self, k: usize) -> DMatrixView<'_, f64> {
        let n = (self.horizon + 1) * self.n_x;
        self.fzeta.view((k * self.n_x, 0), (self.n_x, n))
    }

    /// `g' F_u` for a gradient given as per-timestep slices, skipping zero
    /// slices and the structurally zero column blocks.
    pub fn grad_times_fu(&self, slices: &[DVector<f64>]) -> DVector<f64> {
        let mut out = DVector::zeros(self.horizon * self.n_u);
        for (k, g) in slices.iter().enumerate() {
            if k == 0 || g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let cols = k * self.n_u;
            let block = self.fu.view((k * self.n_x, 0), (self.n_x, cols));
            let mut head = out.rows_mut(0, cols);
            head.gemv_tr(1.0, &block, g, 1.0);
        }
        out
    }

    /// `g' F_zeta` for a gradient given as per-timestep slices.
    pub fn grad_times_fzeta(&self, slices: &[DVector<f64>]) -> DVector<f64> {
        let n = (self.horizon + 1) * self.n_x;
        let mut out = DVector::zeros(n);
        for (k, g) in slices.iter().enumerate() {
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            // F_zeta row block k is zero beyond column block k
            let cols = (k + 1) * self.n_x;
            let block = self.fzeta.view((k * self.n_x, 0), (self.n_x, cols));
            let mut head = out.rows_mut(0, cols);
            head.gemv_tr(1.0, &block, g, 1.0);
        }
        out
    }
}

/// Block-diagonal feedback `K = bdiag(K_0, .., K_{T-1})` acting on the stacked
/// disturbance, so that `u_k` sees `zeta` block `k` (`d_{k-1}`, with
/// `d_{-1} = d0_bar`). The last column block of the assembled matrix is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyMatrix {
    pub blocks: Vec<DMatrix<f64>>,
}

impl PolicyMatrix {
    pub fn zeros(horizon: usize, n_u: usize, n_x: usize) -> Self {
        Self { blocks: vec![DMatrix::zeros(n_u, n_x); horizon] }
    }

    pub fn horizon(&self) -> usize {
        self.blocks.len()
    }

    /// Blocks from a column-major stacking of each `K_k` in turn.
    pub fn from_vectorized(v: &[f64], horizon: usize, n_u: usize, n_x: usize) -> Result<Self> {
        let per = n_u * n_x;
        if v.len() != horizon * per {
            return Err(Error::invalid(format!(
                "vectorized gains have length {}, expected {}",
                v.len(),
                horizon * per
            )));
        }
        Ok(Self {
            blocks: v
                .chunks(per)
                .map(|c| DMatrix::from_column_slice(n_u, n_x, c))
                .collect(),
        })
    }

    pub fn vectorized(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.iter().copied()).collect()
    }

    pub fn assembled(&self) -> DMatrix<f64> {
        let t = self.blocks.len();
        let (n_u, n_x) = self.blocks.first().map_or((0, 0), DMatrix::shape);
        let mut k = DMatrix::zeros(t * n_u, (t + 1) * n_x);
        for (i, b) in self.blocks.iter().enumerate() {
            k.view_mut((i * n_u, i * n_x), (n_u, n_x)).copy_from(b);
        }
        k
    }

    /// `K zeta` without forming the dense matrix.
    pub fn apply(&self, zeta: &DVector<f64>) -> DVector<f64> {
        let (n_u, n_x) = self.blocks.first().map_or((0, 0), DMatrix::shape);
        let mut out = DVector::zeros(self.blocks.len() * n_u);
        for (i, b) in self.blocks.iter().enumerate() {
            out.rows_mut(i * n_u, n_u)
                .copy_from(&(b * zeta.rows(i * n_x, n_x)));
        }
        out
    }
}

/// Jacobians of `model` along `nominal`, stacked.
pub fn linearize_dynamics(model: &DynamicsModel, nominal: &NominalTrajectory) -> Result<StackedBlocks> {
    let (mut a_list, mut b_list) = (Vec::new(), Vec::new());
    for (k, (x, u)) in nominal.states.iter().zip(&nominal.controls).enumerate() {
        let (a, b) = model.jacobians(x, u).map_err(|e| e.at_step(k))?;
        a_list.push(a);
        b_list.push(b);
    }
    StackedBlocks::build(a_list, b_list)
}

/// `F_u (du + K zeta) + F_zeta zeta`: deviation of the linearized closed loop
/// from the nominal trajectory.
pub fn stacked_response(
    blocks: &StackedBlocks,
    gains: &PolicyMatrix,
    delta_u: &DVector<f64>,
    zeta: &DVector<f64>,
) -> Result<DVector<f64>> {
    let nz = (blocks.horizon + 1) * blocks.n_x;
    if delta_u.len() != blocks.horizon * blocks.n_u || zeta.len() != nz || gains.horizon() != blocks.horizon {
        return Err(Error::invalid("stacked_response dimension mismatch"));
    }
    let u = delta_u + gains.apply(zeta);
    Ok(&blocks.fu * u + &blocks.fzeta * zeta)
}
