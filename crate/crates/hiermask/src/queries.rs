//! Class queries, the detection→diagnosis hierarchy expansion, and the
//! transformer decoder that refines queries against the feature pyramid.
//!
//! Three query families exist:
//!
//! * detection queries `A` — one per major tumor class;
//! * diagnosis queries `B` — one per subtype; in hierarchy mode they are
//!   *derived* from `A` by per-major expansion matrices (`B_i = A_i W_iᵀ`),
//!   in parallel/plain modes they are independent parameters;
//! * shared queries `S` — one per organ and per subtype-free tumor class,
//!   plus a trailing background query used by both decoding heads.
//!
//! The decoder runs a fixed number of pre-norm transformer layers, each
//! cross-attending to one pyramid level (coarsest first), then
//! self-attending across all queries, then applying a feed-forward block.
//! No positional encodings are added anywhere, so outputs are invariant to
//! permutations of the feature columns.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::backbone::FeaturePyramid;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, RepresentationMode};
use crate::params::{normal, xavier_uniform, zeros, BoundParams, ParamStore};
use crate::taxonomy::Taxonomy;

/// Row layout of the query stack for a taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueryLayout {
    /// Number of detection (major) queries.
    pub majors: usize,
    /// Total number of diagnosis (subtype) queries.
    pub subtypes: usize,
    /// Shared queries including the trailing background query.
    pub shared_with_bg: usize,
}

impl QueryLayout {
    pub fn of(taxonomy: &Taxonomy) -> Self {
        QueryLayout {
            majors: taxonomy.major_count(),
            subtypes: taxonomy.subtype_count(),
            shared_with_bg: taxonomy.shared_count() + 1,
        }
    }

    /// Rows in the decoder stack for a representation mode.
    pub fn stack_rows(&self, mode: RepresentationMode) -> usize {
        match mode {
            RepresentationMode::Plain => self.subtypes + self.shared_with_bg,
            _ => self.majors + self.subtypes + self.shared_with_bg,
        }
    }
}

fn attn_params<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, d: usize) -> Result<()> {
    for name in ["wq", "wk", "wv", "wo"] {
        store.insert(&format!("{prefix}.{name}"), xavier_uniform(rng, &[d, d], d, d))?;
    }
    for name in ["bq", "bk", "bv", "bo"] {
        store.insert(&format!("{prefix}.{name}"), zeros(&[d]))?;
    }
    Ok(())
}

fn norm_params(store: &mut ParamStore, prefix: &str, d: usize) -> Result<()> {
    store.insert(&format!("{prefix}.gamma"), crate::params::ones(&[d]))?;
    store.insert(&format!("{prefix}.beta"), zeros(&[d]))
}

/// Register query and decoder parameters under the `queries.`/`decoder.`
/// prefixes. Which query tensors exist depends on the representation mode.
pub fn init_params<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    cfg: &ModelConfig,
    taxonomy: &Taxonomy,
) -> Result<()> {
    let d = cfg.query_dim;
    let layout = QueryLayout::of(taxonomy);
    let sigma = (1.0 / d as f64).sqrt();
    match cfg.mode {
        RepresentationMode::Hierarchy => {
            store.insert("queries.detection", normal(rng, &[layout.majors, d], sigma))?;
            for (i, n_i) in taxonomy.subtype_group_sizes().iter().enumerate() {
                store.insert(
                    &format!("queries.expand.w{i}"),
                    xavier_uniform(rng, &[n_i * d, d], d, n_i * d),
                )?;
            }
        }
        RepresentationMode::Parallel => {
            store.insert("queries.detection", normal(rng, &[layout.majors, d], sigma))?;
            store.insert("queries.diagnosis", normal(rng, &[layout.subtypes, d], sigma))?;
        }
        RepresentationMode::Plain => {
            store.insert("queries.diagnosis", normal(rng, &[layout.subtypes, d], sigma))?;
        }
    }
    store.insert("queries.shared", normal(rng, &[layout.shared_with_bg, d], sigma))?;

    for l in 1..=cfg.decoder_layers {
        let p = format!("decoder.layer{l}");
        norm_params(store, &format!("{p}.ln1"), d)?;
        attn_params(store, rng, &format!("{p}.cross"), d)?;
        norm_params(store, &format!("{p}.ln2"), d)?;
        attn_params(store, rng, &format!("{p}.self"), d)?;
        norm_params(store, &format!("{p}.ln3"), d)?;
        let hidden = cfg.ffn_expansion * d;
        store.insert(&format!("{p}.ffn.w1"), xavier_uniform(rng, &[hidden, d], d, hidden))?;
        store.insert(&format!("{p}.ffn.b1"), zeros(&[hidden]))?;
        store.insert(&format!("{p}.ffn.w2"), xavier_uniform(rng, &[d, hidden], hidden, d))?;
        store.insert(&format!("{p}.ffn.b2"), zeros(&[d]))?;
    }
    Ok(())
}

/// Expand detection queries `(m, d)` into diagnosis queries `(n, d)`:
/// major `i`'s row maps through its `(n_i·d, d)` expansion matrix and the
/// result is reshaped into `n_i` stacked query rows.
pub fn expand_hierarchy(
    g: &mut Graph,
    detection: Var,
    expansions: &[Var],
    group_sizes: &[usize],
    d: usize,
) -> Result<Var> {
    let shape = g.value(detection).shape().to_vec();
    if shape != [group_sizes.len(), d] {
        return Err(Error::Data(format!(
            "detection queries have shape {shape:?}, expected [{}, {d}]",
            group_sizes.len()
        )));
    }
    if expansions.len() != group_sizes.len() {
        return Err(Error::Data(format!(
            "{} expansion matrices for {} majors",
            expansions.len(),
            group_sizes.len()
        )));
    }
    let mut parts = Vec::with_capacity(group_sizes.len());
    for (i, (&w, &n_i)) in expansions.iter().zip(group_sizes).enumerate() {
        let ws = g.value(w).shape().to_vec();
        if ws != [n_i * d, d] {
            return Err(Error::Data(format!(
                "expansion matrix {i} has shape {ws:?}, expected [{}, {d}]",
                n_i * d
            )));
        }
        let a_i = g.slice_axis0(detection, i, 1);
        let flat = g.matmul(a_i, w, false, true); // (1, n_i·d)
        parts.push(g.reshape(flat, &[n_i, d]));
    }
    Ok(g.concat_axis0(&parts))
}

/// Multi-head attention. `x` is the query-side input `(Q, d)`; `keys` is
/// either `(N, d)` (self-attention) or transposed `(d, N)` features
/// (cross-attention, signalled by `keys_transposed`).
fn attention(
    g: &mut Graph,
    p: &BoundParams,
    prefix: &str,
    x: Var,
    keys: Var,
    keys_transposed: bool,
    heads: usize,
) -> Var {
    let d = g.value(x).shape()[1];
    let dh = d / heads;
    let wq = p.var(&format!("{prefix}.wq"));
    let wk = p.var(&format!("{prefix}.wk"));
    let wv = p.var(&format!("{prefix}.wv"));
    let wo = p.var(&format!("{prefix}.wo"));
    let q0 = g.matmul(x, wq, false, true);
    let q = {
        let b = p.var(&format!("{prefix}.bq"));
        g.add_bias_col(q0, b)
    };
    let k0 = g.matmul(keys, wk, keys_transposed, true);
    let k = {
        let b = p.var(&format!("{prefix}.bk"));
        g.add_bias_col(k0, b)
    };
    let v0 = g.matmul(keys, wv, keys_transposed, true);
    let v = {
        let b = p.var(&format!("{prefix}.bv"));
        g.add_bias_col(v0, b)
    };
    let scale = 1.0 / (dh as f64).sqrt();
    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_axis1(q, h * dh, dh);
        let kh = g.slice_axis1(k, h * dh, dh);
        let vh = g.slice_axis1(v, h * dh, dh);
        let scores = g.matmul(qh, kh, false, true);
        let scaled = g.scale(scores, scale);
        let attn = g.softmax(scaled, 1); // normalize over keys per query row
        head_outputs.push(g.matmul(attn, vh, false, false));
    }
    let concat = g.concat_axis1(&head_outputs);
    let out = g.matmul(concat, wo, false, true);
    let bo = p.var(&format!("{prefix}.bo"));
    g.add_bias_col(out, bo)
}

fn ffn(g: &mut Graph, p: &BoundParams, prefix: &str, x: Var) -> Var {
    let w1 = p.var(&format!("{prefix}.w1"));
    let b1 = p.var(&format!("{prefix}.b1"));
    let w2 = p.var(&format!("{prefix}.w2"));
    let b2 = p.var(&format!("{prefix}.b2"));
    let h = g.matmul(x, w1, false, true);
    let h = g.add_bias_col(h, b1);
    let h = g.relu(h);
    let y = g.matmul(h, w2, false, true);
    g.add_bias_col(y, b2)
}

fn layer_norm(g: &mut Graph, p: &BoundParams, prefix: &str, x: Var, eps: f64) -> Var {
    let gamma = p.var(&format!("{prefix}.gamma"));
    let beta = p.var(&format!("{prefix}.beta"));
    g.layer_norm_rows(x, gamma, beta, eps)
}

/// One pre-norm decoder layer: cross-attention to `feat`, self-attention,
/// feed-forward, each with a residual connection.
pub fn decoder_layer(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &ModelConfig,
    layer: usize,
    q: Var,
    feat: Var,
) -> Var {
    let prefix = format!("decoder.layer{layer}");
    let eps = cfg.norm_eps;
    let h = layer_norm(g, p, &format!("{prefix}.ln1"), q, eps);
    let ca = attention(g, p, &format!("{prefix}.cross"), h, feat, true, cfg.heads);
    let q = g.add(q, ca);
    let h = layer_norm(g, p, &format!("{prefix}.ln2"), q, eps);
    let sa = attention(g, p, &format!("{prefix}.self"), h, h, false, cfg.heads);
    let q = g.add(q, sa);
    let h = layer_norm(g, p, &format!("{prefix}.ln3"), q, eps);
    let ff = ffn(g, p, &format!("{prefix}.ffn"), h);
    g.add(q, ff)
}

/// Query stacks after decoder refinement, split back into families.
pub struct RefinedQueries {
    /// Detection queries `(m, d)`; absent in plain mode.
    pub detection: Option<Var>,
    /// Diagnosis queries `(n, d)`.
    pub diagnosis: Var,
    /// Shared queries `(s+1, d)`, background last.
    pub shared: Var,
}

/// Assemble the initial query stack, refine it through the decoder
/// (coarsest pyramid level first), and split the result.
pub fn run_decoder(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &ModelConfig,
    taxonomy: &Taxonomy,
    pyramid: &FeaturePyramid,
) -> Result<RefinedQueries> {
    let layout = QueryLayout::of(taxonomy);
    let d = cfg.query_dim;
    let shared = p.var("queries.shared");

    let stack0 = match cfg.mode {
        RepresentationMode::Hierarchy => {
            let a = p.var("queries.detection");
            let ws: Vec<Var> = (0..taxonomy.major_count())
                .map(|i| p.var(&format!("queries.expand.w{i}")))
                .collect();
            let b = expand_hierarchy(g, a, &ws, &taxonomy.subtype_group_sizes(), d)?;
            g.concat_axis0(&[a, b, shared])
        }
        RepresentationMode::Parallel => {
            let a = p.var("queries.detection");
            let b = p.var("queries.diagnosis");
            g.concat_axis0(&[a, b, shared])
        }
        RepresentationMode::Plain => {
            let b = p.var("queries.diagnosis");
            g.concat_axis0(&[b, shared])
        }
    };
    debug_assert_eq!(g.value(stack0).shape()[0], layout.stack_rows(cfg.mode));

    // Coarsest-first: layer 1 sees level 4, layer 2 level 3, layer 3 level 2.
    let mut stack = stack0;
    for l in 1..=cfg.decoder_layers {
        let feat = pyramid.features[crate::backbone::LEVELS - l];
        stack = decoder_layer(g, p, cfg, l, stack, feat);
    }
    if g.value(stack).iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence("refined queries contain non-finite values".into()));
    }

    let rows = g.value(stack).shape()[0];
    debug_assert_eq!(rows, layout.stack_rows(cfg.mode));
    Ok(match cfg.mode {
        RepresentationMode::Plain => RefinedQueries {
            detection: None,
            diagnosis: g.slice_axis0(stack, 0, layout.subtypes),
            shared: g.slice_axis0(stack, layout.subtypes, layout.shared_with_bg),
        },
        _ => RefinedQueries {
            detection: Some(g.slice_axis0(stack, 0, layout.majors)),
            diagnosis: g.slice_axis0(stack, layout.majors, layout.subtypes),
            shared: g.slice_axis0(stack, layout.majors + layout.subtypes, layout.shared_with_bg),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::taxonomy::TaxonomySpec;
    use ndarray::{Array2, IxDyn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let dist = Normal::new(0.0, 1.0).unwrap();
        let n: usize = shape.iter().product();
        Tensor::from_shape_vec(IxDyn(shape), (0..n).map(|_| dist.sample(rng)).collect()).unwrap()
    }

    /// Expansion matrices of stacked identities: every derived row must be
    /// bitwise equal to its source detection row.
    #[test]
    fn block_identity_expansion_copies_rows() {
        let d = 6;
        let groups = [2usize, 3];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn(&mut rng, &[groups.len(), d]);
        let mut g = Graph::new();
        let va = g.param(a.clone());
        let mut ws = Vec::new();
        for &n_i in &groups {
            let mut w = Tensor::zeros(IxDyn(&[n_i * d, d]));
            for r in 0..n_i {
                for j in 0..d {
                    w[[r * d + j, j]] = 1.0;
                }
            }
            ws.push(g.constant(w));
        }
        let b = expand_hierarchy(&mut g, va, &ws, &groups, d).unwrap();
        let bv = g.value(b);
        assert_eq!(bv.shape(), &[5, d]);
        let mut row = 0;
        for (i, &n_i) in groups.iter().enumerate() {
            for _ in 0..n_i {
                for j in 0..d {
                    // Bitwise: multiplying by an identity block must not
                    // perturb a single ulp.
                    assert_eq!(bv[[row, j]].to_bits(), a[[i, j]].to_bits());
                }
                row += 1;
            }
        }
    }

    /// Random expansions against an index-level loop oracle.
    #[test]
    fn expansion_matches_loop_oracle() {
        let d = 5;
        let groups = [3usize, 2, 4];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = randn(&mut rng, &[groups.len(), d]);
        let ws: Vec<Tensor> = groups.iter().map(|&n| randn(&mut rng, &[n * d, d])).collect();

        let mut g = Graph::new();
        let va = g.constant(a.clone());
        let vws: Vec<Var> = ws.iter().map(|w| g.constant(w.clone())).collect();
        let b = expand_hierarchy(&mut g, va, &vws, &groups, d).unwrap();
        let bv = g.value(b).clone();

        // Oracle: b[row r of group i][j] = Σ_k a[i][k] · w_i[r·d + j][k].
        let mut row = 0;
        for (i, &n_i) in groups.iter().enumerate() {
            for r in 0..n_i {
                for j in 0..d {
                    let mut acc = 0.0;
                    for k in 0..d {
                        acc += a[[i, k]] * ws[i][[r * d + j, k]];
                    }
                    assert!(
                        (bv[[row, j]] - acc).abs() < 1e-12,
                        "row {row} col {j}: {} vs {acc}",
                        bv[[row, j]]
                    );
                }
                row += 1;
            }
        }
    }

    #[test]
    fn expansion_shape_errors() {
        let d = 4;
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(IxDyn(&[2, d])));
        let w_ok = g.constant(Tensor::zeros(IxDyn(&[2 * d, d])));
        let w_bad = g.constant(Tensor::zeros(IxDyn(&[3 * d, d])));
        assert!(expand_hierarchy(&mut g, a, &[w_ok, w_bad], &[2, 2], d).is_err());
        assert!(expand_hierarchy(&mut g, a, &[w_ok], &[2, 2], d).is_err());
    }

    fn test_cfg(mode: RepresentationMode) -> ModelConfig {
        ModelConfig {
            mode,
            query_dim: 8,
            base_channels: 2,
            heads: 2,
            ffn_expansion: 2,
            ..ModelConfig::default()
        }
    }

    fn fake_pyramid(g: &mut Graph, d: usize, rng: &mut ChaCha8Rng) -> FeaturePyramid {
        // Shapes do not need to correspond to any real patch: the decoder
        // only consumes the (d, N) feature matrices.
        let spatial = [[4, 4, 4], [2, 2, 2], [2, 2, 1], [1, 1, 2]];
        let features = std::array::from_fn(|j| {
            let n: usize = spatial[j].iter().product();
            g.constant(randn(rng, &[d, n]))
        });
        FeaturePyramid { features, spatial }
    }

    fn refine(
        mode: RepresentationMode,
        seed: u64,
        permute_features: bool,
    ) -> (Graph, RefinedQueries) {
        let tax = Taxonomy::new(TaxonomySpec::four_organ()).unwrap();
        let cfg = test_cfg(mode);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_params(&mut store, &mut rng, &cfg, &tax).unwrap();
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let mut frng = ChaCha8Rng::seed_from_u64(99);
        let mut pyr = fake_pyramid(&mut g, cfg.query_dim, &mut frng);
        if permute_features {
            // Reverse the columns of every level: a permutation of voxels.
            for f in pyr.features.iter_mut() {
                let v = g.value(*f).clone().into_dimensionality::<ndarray::Ix2>().unwrap();
                let rev: Array2<f64> = v.slice(ndarray::s![.., ..;-1]).to_owned();
                *f = g.constant(rev.into_dyn());
            }
        }
        let refined = run_decoder(&mut g, &bound, &cfg, &tax, &pyr).unwrap();
        (g, refined)
    }

    #[test]
    fn stack_rows_per_mode() {
        let tax = Taxonomy::new(TaxonomySpec::eight_organ()).unwrap();
        let layout = QueryLayout::of(&tax);
        assert_eq!(layout.stack_rows(RepresentationMode::Hierarchy), 4 + 10 + 13);
        assert_eq!(layout.stack_rows(RepresentationMode::Parallel), 4 + 10 + 13);
        assert_eq!(layout.stack_rows(RepresentationMode::Plain), 10 + 13);
    }

    #[test]
    fn refined_query_shapes() {
        for mode in [
            RepresentationMode::Hierarchy,
            RepresentationMode::Parallel,
            RepresentationMode::Plain,
        ] {
            let (g, r) = refine(mode, 3, false);
            let tax = Taxonomy::new(TaxonomySpec::four_organ()).unwrap();
            let layout = QueryLayout::of(&tax);
            assert_eq!(g.value(r.diagnosis).shape(), &[layout.subtypes, 8]);
            assert_eq!(g.value(r.shared).shape(), &[layout.shared_with_bg, 8]);
            match mode {
                RepresentationMode::Plain => assert!(r.detection.is_none()),
                _ => {
                    assert_eq!(g.value(r.detection.unwrap()).shape(), &[layout.majors, 8]);
                }
            }
        }
    }

    #[test]
    fn decoder_no_positional_encoding() {
        // Permuting feature columns must not change refined queries beyond
        // floating-point reassociation noise.
        let (g1, r1) = refine(RepresentationMode::Hierarchy, 5, false);
        let (g2, r2) = refine(RepresentationMode::Hierarchy, 5, true);
        let a = g1.value(r1.diagnosis);
        let b = g2.value(r2.diagnosis);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
    }

    #[test]
    fn decoder_deterministic() {
        let (g1, r1) = refine(RepresentationMode::Parallel, 7, false);
        let (g2, r2) = refine(RepresentationMode::Parallel, 7, false);
        assert_eq!(g1.value(r1.diagnosis), g2.value(r2.diagnosis));
        assert_eq!(g1.value(r1.shared), g2.value(r2.shared));
    }

    /// With a single query attending to a single feature column, softmax
    /// weight is exactly 1, so cross-attention reduces to the value path:
    /// out = Wo (Wv f + bv) + bo.
    #[test]
    fn single_position_cross_attention_is_value_projection() {
        let d = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        attn_params(&mut store, &mut rng, "t", d).unwrap();
        // Make parameters non-trivial.
        *store.get_mut("t.bv").unwrap() = randn(&mut rng, &[d]);
        *store.get_mut("t.bo").unwrap() = randn(&mut rng, &[d]);
        let x = randn(&mut rng, &[1, d]);
        let f = randn(&mut rng, &[d, 1]);
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let vx = g.constant(x.clone());
        let vf = g.constant(f.clone());
        let out = attention(&mut g, &bound, "t", vx, vf, true, 2);
        let got = g.value(out).clone();

        // Reference: v = Wv f + bv (row vector), out = v Woᵀ + bo.
        let wv = store.get("t.wv").unwrap().clone().into_dimensionality::<ndarray::Ix2>().unwrap();
        let wo = store.get("t.wo").unwrap().clone().into_dimensionality::<ndarray::Ix2>().unwrap();
        let bv = store.get("t.bv").unwrap().clone().into_dimensionality::<ndarray::Ix1>().unwrap();
        let bo = store.get("t.bo").unwrap().clone().into_dimensionality::<ndarray::Ix1>().unwrap();
        let fcol = f.clone().into_dimensionality::<ndarray::Ix2>().unwrap();
        let v = wv.dot(&fcol.column(0).to_owned()) + &bv;
        let expect = wo.dot(&v) + &bo;
        for j in 0..d {
            assert!(
                (got[[0, j]] - expect[j]).abs() < 1e-12,
                "{} vs {}",
                got[[0, j]],
                expect[j]
            );
        }
    }

    #[test]
    fn gradients_reach_all_query_parameters() {
        let tax = Taxonomy::new(TaxonomySpec::four_organ()).unwrap();
        for mode in [
            RepresentationMode::Hierarchy,
            RepresentationMode::Parallel,
            RepresentationMode::Plain,
        ] {
            let cfg = test_cfg(mode);
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            init_params(&mut store, &mut rng, &cfg, &tax).unwrap();
            let mut g = Graph::new();
            let bound = store.bind(&mut g);
            let mut frng = ChaCha8Rng::seed_from_u64(17);
            let pyr = fake_pyramid(&mut g, cfg.query_dim, &mut frng);
            let refined = run_decoder(&mut g, &bound, &cfg, &tax, &pyr).unwrap();
            let mut pieces = vec![g.sum_all(refined.diagnosis), g.sum_all(refined.shared)];
            if let Some(det) = refined.detection {
                pieces.push(g.sum_all(det));
            }
            let mut total = pieces[0];
            for p in &pieces[1..] {
                total = g.add(total, *p);
            }
            g.backward(total).unwrap();
            let grads = bound.grads(&g);
            for name in store.names() {
                let norm: f64 = grads[name].iter().map(|v| v * v).sum();
                assert!(norm > 0.0, "mode {mode}: no gradient reached {name}");
            }
        }
    }
}
