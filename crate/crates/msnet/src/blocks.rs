//! Hierarchical multi-branch blocks and global-query gating.
//!
//! An [`MsBlock`] transforms its input with an entry 1x1 conv, splits the
//! result into N equal-width groups, chains branch operators so each branch
//! sees the previous branch's output added to its own slice, optionally
//! scales every branch with a gate derived from a shared [`GlobalQuery`],
//! then concatenates and fuses with an exit 1x1 conv. Each operator branch
//! stacks one more depthwise convolution than its predecessor, so analytic
//! receptive fields strictly grow along the branch index.
//!
//! Branch fusion typing: inverted-bottleneck (IBM) branches produce width
//! `w`, so the hierarchical addition happens at width `w` before the
//! pointwise expansion. Simplified branches (SIBM) omit the projection and
//! produce width `r*w`; their addition happens after the pointwise
//! expansion, at width `r*w`, and the first operator branch starts the chain
//! without a predecessor term (the identity branch's width-`w` output cannot
//! enter the expanded space).

use crate::error::{Error, Result};
use crate::nn::{ConvBnAct, Linear, Mode, StateSink};
use crate::rng::Rng;
use crate::tensor::{concat_channels, linear, Element, Tensor};

/// Branch operator family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchKind {
    /// Inverted bottleneck: pointwise expand, depthwise k x k, pointwise
    /// project back to the branch width.
    Ibm,
    /// Simplified inverted bottleneck: no final projection, output stays at
    /// the expanded width.
    Sibm,
}

impl BranchKind {
    pub fn name(self) -> &'static str {
        match self {
            BranchKind::Ibm => "ibm",
            BranchKind::Sibm => "sibm",
        }
    }
}

/// One branch of an [`MsBlock`].
pub enum BranchOperator<T: Element> {
    /// Pass-through used by analysis and tests: the branch reduces to the
    /// hierarchical addition alone.
    Identity,
    Ibm { expand: ConvBnAct<T>, dw: ConvBnAct<T>, project: ConvBnAct<T> },
    Sibm { expand: ConvBnAct<T>, dw: ConvBnAct<T> },
}

impl<T: Element> BranchOperator<T> {
    pub fn new(
        name: &str,
        seed: u64,
        kind: BranchKind,
        width: usize,
        kernel: usize,
        expansion: usize,
    ) -> Result<Self> {
        let mid = width * expansion;
        let expand = ConvBnAct::new(&format!("{name}.expand"), seed, width, mid, 1, 1, 1)?;
        let dw = ConvBnAct::new(&format!("{name}.dw"), seed, mid, mid, kernel, 1, mid)?;
        Ok(match kind {
            BranchKind::Ibm => BranchOperator::Ibm {
                expand,
                dw,
                project: ConvBnAct::new(&format!("{name}.project"), seed, mid, width, 1, 1, 1)?,
            },
            BranchKind::Sibm => BranchOperator::Sibm { expand, dw },
        })
    }

    /// Output channel count given the branch width and expansion ratio.
    pub fn out_width(&self, width: usize, expansion: usize) -> usize {
        match self {
            BranchOperator::Identity | BranchOperator::Ibm { .. } => width,
            BranchOperator::Sibm { .. } => width * expansion,
        }
    }

    /// Apply the operator to slice `x`, fusing the previous branch output
    /// `prev` according to the operator's typing (see module docs).
    pub fn forward(&self, x: &Tensor<T>, prev: Option<&Tensor<T>>, mode: Mode) -> Result<Tensor<T>> {
        match self {
            BranchOperator::Identity => match prev {
                Some(p) => x.add(p),
                None => Ok(x.clone()),
            },
            BranchOperator::Ibm { expand, dw, project } => {
                let fused = match prev {
                    Some(p) => x.add(p)?,
                    None => x.clone(),
                };
                project.forward(&dw.forward(&expand.forward(&fused, mode)?, mode)?, mode)
            }
            BranchOperator::Sibm { expand, dw } => {
                let expanded = expand.forward(x, mode)?;
                let fused = match prev {
                    Some(p) => expanded.add(p)?,
                    None => expanded,
                };
                dw.forward(&fused, mode)
            }
        }
    }

    /// Whether the hierarchical chain includes the identity branch's output
    /// as the predecessor of the first operator branch.
    fn chains_from_identity(&self) -> bool {
        !matches!(self, BranchOperator::Sibm { .. })
    }

    pub fn visit_state(&self, prefix: &str, sink: &mut dyn StateSink<T>) {
        match self {
            BranchOperator::Identity => {}
            BranchOperator::Ibm { expand, dw, project } => {
                expand.visit_state(&format!("{prefix}.expand"), sink);
                dw.visit_state(&format!("{prefix}.dw"), sink);
                project.visit_state(&format!("{prefix}.project"), sink);
            }
            BranchOperator::Sibm { expand, dw } => {
                expand.visit_state(&format!("{prefix}.expand"), sink);
                dw.visit_state(&format!("{prefix}.dw"), sink);
            }
        }
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        match self {
            BranchOperator::Identity => {}
            BranchOperator::Ibm { expand, dw, project } => {
                expand.visit_params_mut(&format!("{prefix}.expand"), f);
                dw.visit_params_mut(&format!("{prefix}.dw"), f);
                project.visit_params_mut(&format!("{prefix}.project"), f);
            }
            BranchOperator::Sibm { expand, dw } => {
                expand.visit_params_mut(&format!("{prefix}.expand"), f);
                dw.visit_params_mut(&format!("{prefix}.dw"), f);
            }
        }
    }
}

// ── Global query ────────────────────────────────────────────────────────

/// Learnable query shared by every gated block of a model: one row per
/// branch, `dim` features per row (default 16 = 4 squared).
pub struct GlobalQuery<T: Element> {
    pub query: Tensor<T>,
    pub branches: usize,
    pub dim: usize,
}

/// Half-width of the uniform initialization of the query; keeps initial
/// gates near one half.
pub const QUERY_INIT_HALF_WIDTH: f64 = 0.02;

/// Default query feature dimension (spatial size 4 squared).
pub const QUERY_DIM_DEFAULT: usize = 16;

impl<T: Element> GlobalQuery<T> {
    pub fn new(seed: u64, branches: usize, dim: usize) -> Result<Self> {
        let mut rng = Rng::derive(seed, "gql.query");
        let data = (0..branches * dim)
            .map(|_| T::from_f64(rng.uniform_in(-QUERY_INIT_HALF_WIDTH, QUERY_INIT_HALF_WIDTH)))
            .collect();
        Ok(GlobalQuery { query: Tensor::param(&[branches, dim], data)?, branches, dim })
    }

    /// Build from explicit values (tests and saturation experiments).
    pub fn from_values(branches: usize, dim: usize, values: Vec<T>) -> Result<Self> {
        Ok(GlobalQuery { query: Tensor::param(&[branches, dim], values)?, branches, dim })
    }

    pub fn visit_state(&self, prefix: &str, sink: &mut dyn StateSink<T>) {
        sink.param(&format!("{prefix}.query"), &self.query);
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{prefix}.query"), &mut self.query);
    }
}

/// Per-block projection from the pooled block feature to the query
/// dimension: K = Linear(GAP(X)).
pub struct GqlProjection<T: Element> {
    pub linear: Linear<T>,
}

impl<T: Element> GqlProjection<T> {
    pub fn new(name: &str, seed: u64, in_features: usize, dim: usize) -> Result<Self> {
        Ok(GqlProjection {
            linear: Linear::new(&format!("{name}.linear"), seed, in_features, dim, true)?,
        })
    }

    pub fn visit_state(&self, prefix: &str, sink: &mut dyn StateSink<T>) {
        self.linear.visit_state(&format!("{prefix}.linear"), sink);
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.linear.visit_params_mut(&format!("{prefix}.linear"), f);
    }
}

/// Gate vector for one block: `sigmoid(Q K^T)` with `K = Linear(GAP(x))`.
/// `x` is the post-entry-conv feature with N*w channels; the result has one
/// value per branch per batch element, each strictly inside (0, 1).
pub fn gql_gates<T: Element>(
    x: &Tensor<T>,
    query: &GlobalQuery<T>,
    proj: &GqlProjection<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    if proj.linear.out_features != query.dim {
        return Err(Error::ShapeMismatch {
            op: "gql_gates",
            expected: format!("projection output {}", query.dim),
            got: format!("{}", proj.linear.out_features),
        });
    }
    let pooled = x.global_avg_pool()?;
    let key = proj.linear.forward(&pooled, mode)?;
    // One logit per branch: K Q^T, realized as a bias-free affine map whose
    // weight matrix is the query.
    let logits = match mode {
        Mode::Train => linear(&key, &query.query, None)?,
        Mode::Eval | Mode::Calibrate => linear(&key, &query.query.detached(), None)?,
    };
    Ok(logits.sigmoid())
}

/// Scale branch `i` by `gates[:, i]`. Lengths must agree.
pub fn apply_branch_gates<T: Element>(
    branches: &[Tensor<T>],
    gates: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    if gates.rank() != 2 || gates.shape()[1] != branches.len() {
        return Err(Error::ShapeMismatch {
            op: "apply_branch_gates",
            expected: format!("gates (batch, {})", branches.len()),
            got: format!("{:?}", gates.shape()),
        });
    }
    branches.iter().enumerate().map(|(i, b)| b.gate_scale(gates, i)).collect()
}

// ── MsBlock ─────────────────────────────────────────────────────────────

/// Configuration of one multi-scale block.
#[derive(Debug, Clone)]
pub struct MsBlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Branch count N (identity branch included).
    pub branches: usize,
    /// Width of each split group.
    pub width: usize,
    pub kernel: usize,
    pub kind: BranchKind,
    /// Channel expansion ratio inside the branch operators.
    pub expansion: usize,
    /// Query feature dimension when the block is gated; None disables GQL.
    pub gql_dim: Option<usize>,
}

impl MsBlockConfig {
    pub fn concat_width(&self) -> usize {
        let op_width = match self.kind {
            BranchKind::Ibm => self.width,
            BranchKind::Sibm => self.width * self.expansion,
        };
        self.width + (self.branches - 1) * op_width
    }
}

/// Hierarchical multi-branch block with optional global-query gating.
pub struct MsBlock<T: Element> {
    pub cfg: MsBlockConfig,
    pub entry: ConvBnAct<T>,
    pub operators: Vec<BranchOperator<T>>,
    pub exit: ConvBnAct<T>,
    pub gql: Option<GqlProjection<T>>,
}

impl<T: Element> MsBlock<T> {
    pub fn new(name: &str, seed: u64, cfg: MsBlockConfig) -> Result<Self> {
        if cfg.branches < 2 {
            return Err(Error::InvalidArgument {
                op: "ms_block",
                detail: format!("need at least 2 branches, got {}", cfg.branches),
            });
        }
        if cfg.kernel % 2 == 0 || cfg.expansion < 1 {
            return Err(Error::InvalidArgument {
                op: "ms_block",
                detail: "kernel must be odd and expansion >= 1".into(),
            });
        }
        let split_width = cfg.branches * cfg.width;
        let entry =
            ConvBnAct::new(&format!("{name}.entry"), seed, cfg.in_channels, split_width, 1, 1, 1)?;
        let mut operators = Vec::with_capacity(cfg.branches - 1);
        for i in 1..cfg.branches {
            operators.push(BranchOperator::new(
                &format!("{name}.branch{i}"),
                seed,
                cfg.kind,
                cfg.width,
                cfg.kernel,
                cfg.expansion,
            )?);
        }
        let exit = ConvBnAct::new(
            &format!("{name}.exit"),
            seed,
            cfg.concat_width(),
            cfg.out_channels,
            1,
            1,
            1,
        )?;
        let gql = match cfg.gql_dim {
            Some(dim) => Some(GqlProjection::new(&format!("{name}.gql"), seed, split_width, dim)?),
            None => None,
        };
        Ok(MsBlock { cfg, entry, operators, exit, gql })
    }

    /// Replace every branch operator with the identity (analysis/test hook:
    /// branch i then carries the running prefix sum of the split groups).
    pub fn use_identity_operators(&mut self) {
        for op in self.operators.iter_mut() {
            *op = BranchOperator::Identity;
        }
    }

    pub fn forward(
        &self,
        z: &Tensor<T>,
        query: Option<&GlobalQuery<T>>,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        Ok(self.forward_detailed(z, query, mode)?.0)
    }

    /// Forward pass that also returns the per-branch features exactly as
    /// concatenated (post-gate).
    pub fn forward_detailed(
        &self,
        z: &Tensor<T>,
        query: Option<&GlobalQuery<T>>,
        mode: Mode,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        if z.rank() != 4 || z.shape()[1] != self.cfg.in_channels {
            return Err(Error::ShapeMismatch {
                op: "ms_block",
                expected: format!("(_, {}, _, _)", self.cfg.in_channels),
                got: format!("{:?}", z.shape()),
            });
        }
        let n = self.cfg.branches;
        let x = self.entry.forward(z, mode)?;

        // Gates come from the post-entry feature, before any branch work.
        let gates = match (&self.gql, query) {
            (Some(proj), Some(query)) => {
                if query.branches != n {
                    return Err(Error::ShapeMismatch {
                        op: "ms_block",
                        expected: format!("query with {n} branch rows"),
                        got: format!("{}", query.branches),
                    });
                }
                Some(gql_gates(&x, query, proj, mode)?)
            }
            (Some(_), None) => {
                return Err(Error::InvalidArgument {
                    op: "ms_block",
                    detail: "block is gated but no global query was supplied".into(),
                })
            }
            (None, _) => None,
        };

        let groups = x.split_channels(&vec![self.cfg.width; n])?;
        let mut branch_outputs: Vec<Tensor<T>> = Vec::with_capacity(n);
        branch_outputs.push(groups[0].clone());
        for (i, op) in self.operators.iter().enumerate() {
            let prev = if i == 0 && !op.chains_from_identity() {
                None
            } else {
                Some(&branch_outputs[i])
            };
            branch_outputs.push(op.forward(&groups[i + 1], prev, mode)?);
        }

        let gated = match &gates {
            Some(g) => apply_branch_gates(&branch_outputs, g)?,
            None => branch_outputs,
        };
        let out = self.exit.forward(&concat_channels(&gated)?, mode)?;
        Ok((out, gated))
    }

    pub fn visit_state(&self, prefix: &str, sink: &mut dyn StateSink<T>) {
        self.entry.visit_state(&format!("{prefix}.entry"), sink);
        for (i, op) in self.operators.iter().enumerate() {
            op.visit_state(&format!("{prefix}.branch{}", i + 1), sink);
        }
        self.exit.visit_state(&format!("{prefix}.exit"), sink);
        if let Some(g) = &self.gql {
            g.visit_state(&format!("{prefix}.gql"), sink);
        }
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.entry.visit_params_mut(&format!("{prefix}.entry"), f);
        for (i, op) in self.operators.iter_mut().enumerate() {
            op.visit_params_mut(&format!("{prefix}.branch{}", i + 1), f);
        }
        self.exit.visit_params_mut(&format!("{prefix}.exit"), f);
        if let Some(g) = &mut self.gql {
            g.visit_params_mut(&format!("{prefix}.gql"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;

    fn block_cfg(kind: BranchKind, gql: bool) -> MsBlockConfig {
        MsBlockConfig {
            in_channels: 8,
            out_channels: 8,
            branches: 3,
            width: 4,
            kernel: 3,
            kind,
            expansion: 2,
            gql_dim: if gql { Some(QUERY_DIM_DEFAULT) } else { None },
        }
    }

    #[test]
    fn identity_operators_build_prefix_sums() {
        let mut rng = Rng::new(0);
        let mut block = MsBlock::<f64>::new("b", 0, block_cfg(BranchKind::Ibm, false)).unwrap();
        block.use_identity_operators();
        let z = Tensor::randn(&[2, 8, 4, 4], &mut rng).unwrap();
        let (_, branches) = block.forward_detailed(&z, None, Mode::Eval).unwrap();

        let x = block.entry.forward(&z, Mode::Eval).unwrap();
        let groups = x.split_channels(&[4, 4, 4]).unwrap();
        let mut prefix = groups[0].clone();
        assert_eq!(branches[0].data(), prefix.data());
        for i in 1..3 {
            prefix = groups[i].add(&prefix).unwrap();
            assert_eq!(branches[i].data(), prefix.data(), "branch {i} is not the prefix sum");
        }
    }

    #[test]
    fn sibm_branch_width_doubles() {
        let block = MsBlock::<f64>::new("b", 1, block_cfg(BranchKind::Sibm, false)).unwrap();
        let mut rng = Rng::new(2);
        let z = Tensor::randn(&[1, 8, 4, 4], &mut rng).unwrap();
        let (out, branches) = block.forward_detailed(&z, None, Mode::Eval).unwrap();
        assert_eq!(branches[0].shape()[1], 4);
        assert_eq!(branches[1].shape()[1], 8, "expansion ratio 2 must double the branch width");
        assert_eq!(branches[2].shape()[1], 8);
        assert_eq!(out.shape()[1], 8);
    }

    #[test]
    fn gates_are_half_for_zero_query() {
        let block = MsBlock::<f64>::new("b", 3, block_cfg(BranchKind::Sibm, true)).unwrap();
        let query = GlobalQuery::from_values(3, 16, vec![0.0; 48]).unwrap();
        let mut rng = Rng::new(4);
        let z = Tensor::randn(&[2, 8, 4, 4], &mut rng).unwrap();
        let x = block.entry.forward(&z, Mode::Eval).unwrap();
        let gates = gql_gates(&x, &query, block.gql.as_ref().unwrap(), Mode::Eval).unwrap();
        assert!(gates.data().iter().all(|&g| g == 0.5));
    }

    #[test]
    fn saturated_query_rows_drive_gates_to_one() {
        let block = MsBlock::<f64>::new("b", 5, block_cfg(BranchKind::Sibm, true)).unwrap();
        let mut rng = Rng::new(6);
        let z = Tensor::randn(&[1, 8, 4, 4], &mut rng).unwrap();
        let x = block.entry.forward(&z, Mode::Eval).unwrap();

        // K for this input, then Q rows aligned with K scaled to logit 50.
        let pooled = x.global_avg_pool().unwrap();
        let key = block.gql.as_ref().unwrap().linear.forward(&pooled, Mode::Eval).unwrap();
        let k = key.data();
        let norm_sq: f64 = k.iter().map(|v| v * v).sum();
        let mut qv = Vec::with_capacity(48);
        for _ in 0..3 {
            qv.extend(k.iter().map(|v| 50.0 * v / norm_sq));
        }
        let query = GlobalQuery::from_values(3, 16, qv).unwrap();
        let gates = gql_gates(&x, &query, block.gql.as_ref().unwrap(), Mode::Eval).unwrap();
        for &g in gates.data() {
            assert!((1.0 - g).abs() < 1e-20, "gate {g} not saturated");
        }
    }

    #[test]
    fn gate_values_match_matvec_oracle() {
        let mut rng = Rng::new(7);
        let block = MsBlock::<f64>::new("b", 8, block_cfg(BranchKind::Ibm, true)).unwrap();
        let query = GlobalQuery::new(9, 3, 16).unwrap();
        let z = Tensor::randn(&[2, 8, 4, 4], &mut rng).unwrap();
        let x = block.entry.forward(&z, Mode::Eval).unwrap();
        let gates = gql_gates(&x, &query, block.gql.as_ref().unwrap(), Mode::Eval).unwrap();

        let pooled = x.global_avg_pool().unwrap();
        let key = block.gql.as_ref().unwrap().linear.forward(&pooled, Mode::Eval).unwrap();
        for b in 0..2 {
            for row in 0..3 {
                let mut logit = 0.0;
                for d in 0..16 {
                    logit += query.query.data()[row * 16 + d] * key.data()[b * 16 + d];
                }
                let expect = 1.0 / (1.0 + (-logit).exp());
                let got = gates.data()[b * 3 + row];
                assert!((expect - got).abs() < 1e-12, "gate ({b},{row}): {got} vs {expect}");
            }
        }
    }

    #[test]
    fn branch_gate_scaling_is_exact() {
        let a = Tensor::<f64>::full(&[1, 2, 2, 2], 1.0).unwrap();
        let b = Tensor::<f64>::full(&[1, 2, 2, 2], 2.0).unwrap();
        let c = Tensor::<f64>::full(&[1, 2, 2, 2], 4.0).unwrap();
        let gates = Tensor::from_vec(&[1, 3], vec![0.5, 1.0, 0.25]).unwrap();
        let gated = apply_branch_gates(&[a, b, c], &gates).unwrap();
        assert!(gated[0].data().iter().all(|&v| v == 0.5));
        assert!(gated[1].data().iter().all(|&v| v == 2.0));
        assert!(gated[2].data().iter().all(|&v| v == 1.0));

        let ones = Tensor::from_vec(&[1, 3], vec![1.0; 3]).unwrap();
        let x = Tensor::<f64>::full(&[1, 1, 2, 2], 3.0).unwrap();
        let same = apply_branch_gates(&[x.clone(), x.clone(), x.clone()], &ones).unwrap();
        assert!(same.iter().all(|t| t.data() == x.data()));

        let zeros = Tensor::from_vec(&[1, 3], vec![0.0; 3]).unwrap();
        let dead = apply_branch_gates(&[x.clone(), x.clone(), x], &zeros).unwrap();
        assert!(dead.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));

        let two = Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap();
        let y = Tensor::<f64>::zeros(&[1, 1, 2, 2]).unwrap();
        assert!(apply_branch_gates(&[y.clone(), y.clone(), y], &two).is_err());
    }

    #[test]
    fn gating_monotone_and_decoupled() {
        // Increasing one query logit raises only that branch's gate.
        let mut rng = Rng::new(10);
        let key: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
        let gate_for = |q: &[f64], row: usize| {
            let mut logit = 0.0;
            for d in 0..16 {
                logit += q[row * 16 + d] * key[d];
            }
            1.0 / (1.0 + (-logit).exp())
        };
        let base: Vec<f64> = (0..48).map(|_| rng.normal() * 0.1).collect();
        let mut bumped = base.clone();
        // Bump row 1 along K so its logit strictly increases.
        let k_norm_sq: f64 = key.iter().map(|v| v * v).sum();
        for d in 0..16 {
            bumped[16 + d] += 0.5 * key[d] / k_norm_sq;
        }
        assert!(gate_for(&bumped, 1) > gate_for(&base, 1));
        assert_eq!(gate_for(&bumped, 0), gate_for(&base, 0));
        assert_eq!(gate_for(&bumped, 2), gate_for(&base, 2));
    }

    #[test]
    fn gated_block_is_differentiable_through_query() {
        let block = MsBlock::<f64>::new("b", 11, block_cfg(BranchKind::Sibm, true)).unwrap();
        let query = GlobalQuery::new(12, 3, 16).unwrap();
        let mut rng = Rng::new(13);
        let z = Tensor::randn(&[1, 8, 4, 4], &mut rng).unwrap();
        let out = block.forward(&z, Some(&query), Mode::Train).unwrap().sum_all();
        let seed = Tensor::full(&[1], 1.0).unwrap();
        let grads = backward(&out, &seed).unwrap();
        let qg = grads.get(&query.query).expect("query must receive a gradient");
        assert!(qg.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn query_branch_count_mismatch_rejected() {
        let block = MsBlock::<f64>::new("b", 14, block_cfg(BranchKind::Sibm, true)).unwrap();
        let query = GlobalQuery::new(15, 4, 16).unwrap();
        let z = Tensor::<f64>::zeros(&[1, 8, 4, 4]).unwrap();
        assert!(block.forward(&z, Some(&query), Mode::Eval).is_err());
    }

    #[test]
    fn receptive_field_grows_along_branches() {
        // With all-positive weights, a centered impulse produces a strictly
        // wider nonzero support in branch i than in branch i-1.
        let mut block = MsBlock::<f64>::new("b", 16, block_cfg(BranchKind::Sibm, false)).unwrap();
        force_positive_weights(&mut block);
        let mut img = vec![0.0; 8 * 15 * 15];
        for c in 0..8 {
            img[c * 225 + 7 * 15 + 7] = 1.0;
        }
        let z = Tensor::from_vec(&[1, 8, 15, 15], img).unwrap();
        let (_, branches) = block.forward_detailed(&z, None, Mode::Eval).unwrap();

        let widths: Vec<usize> = branches
            .iter()
            .map(|b| {
                // Column support on the centre row, relative to the
                // impulse-free background level of each channel.
                let (c, h, w) = (b.shape()[1], b.shape()[2], b.shape()[3]);
                let mut cols = vec![false; w];
                let data = b.data();
                for ci in 0..c {
                    let bg = data[(ci * h) * w]; // corner, far from impulse
                    for x in 0..w {
                        if (data[(ci * h + 7) * w + x] - bg).abs() > 1e-9 {
                            cols[x] = true;
                        }
                    }
                }
                cols.iter().filter(|&&v| v).count()
            })
            .collect();
        assert!(widths[1] > widths[0], "widths {widths:?}");
        assert!(widths[2] > widths[1], "widths {widths:?}");
    }

    fn force_positive_weights(block: &mut MsBlock<f64>) {
        block.visit_params_mut("b", &mut |name, t| {
            if name.ends_with(".weight") {
                let data = t.data().iter().map(|v| v.abs() + 0.05).collect();
                *t = Tensor::param(t.shape(), data).unwrap();
            }
        });
    }
}
