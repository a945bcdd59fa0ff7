//! 3D encoder–decoder backbone producing a four-level feature pyramid.
//!
//! Four encoder stages (channels `c, 2c, 4c, 8c`, two conv–norm–ReLU units
//! each) are joined by average-pool downsampling; three decoder stages walk
//! back up with nearest-neighbour upsampling and skip concatenation. Each
//! pyramid level is projected to the query dimension `d` by a 1×1×1 linear
//! map and flattened to `(d, N_level)`, ready for attention and mask
//! decoding. Level 1 is the finest (full patch resolution), level 4 the
//! coarsest (the encoder bottleneck).
//!
//! Downsampling factors are per-axis, so anisotropic grids can keep their
//! `z` extent while halving in-plane, mirroring coarse-`z` acquisitions.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::{he_normal, ones, xavier_uniform, zeros, BoundParams, ParamStore};

/// Number of pyramid levels (level 1 = finest … level 4 = coarsest).
pub const LEVELS: usize = 4;

/// The flattened feature pyramid: `features[j]` holds level `j+1` as a
/// `(d, N)` tensor whose columns raster-scan the spatial grid recorded in
/// `spatial[j]`.
pub struct FeaturePyramid {
    pub features: [Var; LEVELS],
    pub spatial: [[usize; 3]; LEVELS],
}

/// Encoder channel widths for a base width `c`.
fn enc_channels(c: usize) -> [usize; 4] {
    [c, 2 * c, 4 * c, 8 * c]
}

fn conv_unit_params<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    c_in: usize,
    c_out: usize,
) -> Result<()> {
    store.insert(&format!("{prefix}.weight"), he_normal(rng, &[c_out, c_in, 3, 3, 3], c_in * 27))?;
    store.insert(&format!("{prefix}.bias"), zeros(&[c_out]))?;
    store.insert(&format!("{prefix}.gamma"), ones(&[c_out]))?;
    store.insert(&format!("{prefix}.beta"), zeros(&[c_out]))?;
    Ok(())
}

fn block_params<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    c_in: usize,
    c_out: usize,
) -> Result<()> {
    conv_unit_params(store, rng, &format!("{prefix}.unit1"), c_in, c_out)?;
    conv_unit_params(store, rng, &format!("{prefix}.unit2"), c_out, c_out)
}

/// Register every backbone parameter under the `backbone.` prefix.
pub fn init_params<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig) -> Result<()> {
    let ch = enc_channels(cfg.base_channels);
    let d = cfg.query_dim;
    block_params(store, rng, "backbone.enc1", 1, ch[0])?;
    block_params(store, rng, "backbone.enc2", ch[0], ch[1])?;
    block_params(store, rng, "backbone.enc3", ch[1], ch[2])?;
    block_params(store, rng, "backbone.enc4", ch[2], ch[3])?;
    block_params(store, rng, "backbone.dec3", ch[3] + ch[2], ch[2])?;
    block_params(store, rng, "backbone.dec2", ch[2] + ch[1], ch[1])?;
    block_params(store, rng, "backbone.dec1", ch[1] + ch[0], ch[0])?;
    for (level, c_in) in [(1, ch[0]), (2, ch[1]), (3, ch[2]), (4, ch[3])] {
        store.insert(
            &format!("backbone.proj{level}.weight"),
            xavier_uniform(rng, &[d, c_in], c_in, d),
        )?;
        store.insert(&format!("backbone.proj{level}.bias"), zeros(&[d]))?;
    }
    Ok(())
}

fn conv_unit(
    g: &mut Graph,
    p: &BoundParams,
    prefix: &str,
    x: Var,
    eps: f64,
) -> Var {
    let y = g.conv3(x, p.var(&format!("{prefix}.weight")), p.var(&format!("{prefix}.bias")));
    let y = g.instance_norm(
        y,
        p.var(&format!("{prefix}.gamma")),
        p.var(&format!("{prefix}.beta")),
        eps,
    );
    g.relu(y)
}

fn block(g: &mut Graph, p: &BoundParams, prefix: &str, x: Var, eps: f64) -> Var {
    let y = conv_unit(g, p, &format!("{prefix}.unit1"), x, eps);
    conv_unit(g, p, &format!("{prefix}.unit2"), y, eps)
}

/// Project a `(c, z, y, x)` feature map to `(d, z·y·x)`.
fn project(g: &mut Graph, p: &BoundParams, level: usize, x: Var) -> Var {
    let shape = g.value(x).shape().to_vec();
    let n: usize = shape[1..].iter().product();
    let flat = g.reshape(x, &[shape[0], n]);
    let w = p.var(&format!("backbone.proj{level}.weight"));
    let b = p.var(&format!("backbone.proj{level}.bias"));
    let y = g.matmul(w, flat, false, false);
    g.add_bias_row(y, b)
}

/// Run the backbone on a `(1, z, y, x)` input previously validated against
/// the configured downsampling factors.
pub fn forward(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &ModelConfig,
    input: Var,
) -> Result<FeaturePyramid> {
    let shape = g.value(input).shape().to_vec();
    if shape.len() != 4 || shape[0] != 1 {
        return Err(Error::Data(format!("backbone expects (1, z, y, x) input, got {shape:?}")));
    }
    let dims = [shape[1], shape[2], shape[3]];
    cfg.check_patch(dims)?;
    let eps = cfg.norm_eps;
    let f = cfg.downsample;

    let e1 = block(g, p, "backbone.enc1", input, eps);
    let p1 = g.avg_pool(e1, f[0]);
    let e2 = block(g, p, "backbone.enc2", p1, eps);
    let p2 = g.avg_pool(e2, f[1]);
    let e3 = block(g, p, "backbone.enc3", p2, eps);
    let p3 = g.avg_pool(e3, f[2]);
    let e4 = block(g, p, "backbone.enc4", p3, eps);

    let u3 = g.upsample_nearest(e4, f[2]);
    let c3 = g.concat_axis0(&[u3, e3]);
    let d3 = block(g, p, "backbone.dec3", c3, eps);
    let u2 = g.upsample_nearest(d3, f[1]);
    let c2 = g.concat_axis0(&[u2, e2]);
    let d2 = block(g, p, "backbone.dec2", c2, eps);
    let u1 = g.upsample_nearest(d2, f[0]);
    let c1 = g.concat_axis0(&[u1, e1]);
    let d1 = block(g, p, "backbone.dec1", c1, eps);

    let spatial = level_dims(cfg, dims);
    let features = [
        project(g, p, 1, d1),
        project(g, p, 2, d2),
        project(g, p, 3, d3),
        project(g, p, 4, e4),
    ];
    Ok(FeaturePyramid { features, spatial })
}

/// Spatial dims of each pyramid level for a given input patch.
pub fn level_dims(cfg: &ModelConfig, dims: [usize; 3]) -> [[usize; 3]; LEVELS] {
    let mut out = [[0usize; 3]; LEVELS];
    out[0] = dims;
    for (t, f) in cfg.downsample.iter().enumerate() {
        for ax in 0..3 {
            out[t + 1][ax] = out[t][ax] / f[ax];
        }
    }
    out
}
