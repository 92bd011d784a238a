use super::config::{NetworkConfig, Task};
use super::session::{Geometry, Session};
use crate::attention::{attention_tape, AttentionVars};
use crate::autodiff::Var;
use crate::cloud::QuantizedCloud;
use crate::error::{shape_err, Error, Result};
use crate::octconv::{EMBED_KERNELS, EMBED_STRIDES};
use crate::tensor::{Scalar, Tensor};

/// Backbone outputs at S/4, S/8, S/16 and S/32.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub levels: [Var; 4],
    pub depths: [u32; 4],
}

/// Leaf features of `cloud` with the signals selected by `cfg`.
pub fn input_features<T: Scalar>(geo: &Geometry, cloud: &QuantizedCloud, cfg: &NetworkConfig) -> Result<Tensor<T>> {
    geo.octree
        .init_leaf_features(cloud, cfg.use_color, cfg.use_normal, cfg.use_position)
}

fn check_rows<T: Scalar>(s: &Session<'_, T>, geo: &Geometry, x: Var, depth: u32) -> Result<()> {
    let rows = s.tape.value(x).rows();
    let want = geo.octree.num_nodes(depth)?;
    if rows != want {
        return Err(shape_err(format!("{rows} rows for {want} nodes at depth {depth}")));
    }
    Ok(())
}

/// Five conv/BN/ReLU modules taking leaf features down to depth `d - 2`.
pub fn embedding<T: Scalar>(s: &Session<'_, T>, geo: &Geometry, x: Var) -> Result<Var> {
    let mut depth = geo.octree.depth();
    if depth < 3 {
        return Err(Error::Config(format!("octree of depth {depth} is too shallow for the embedding")));
    }
    check_rows(s, geo, x, depth)?;
    let mut y = x;
    for (i, (&k, &stride)) in EMBED_KERNELS.iter().zip(&EMBED_STRIDES).enumerate() {
        let table = geo.table(depth, k, stride)?;
        y = s.conv(&format!("embed.{i}.conv"), y, &table)?;
        y = s.batch_norm(&format!("embed.{i}.bn"), y)?;
        y = s.tape.relu(y)?;
        if stride == 2 {
            depth -= 1;
        }
    }
    Ok(y)
}

/// `x + batch_norm(depthwise_conv(x))` at `depth`.
pub fn positional_encoding<T: Scalar>(s: &Session<'_, T>, geo: &Geometry, prefix: &str, x: Var, depth: u32) -> Result<Var> {
    let table = geo.table(depth, 3, 1)?;
    let y = s.depthwise(&format!("{prefix}.conv"), x, &table)?;
    let y = s.batch_norm(&format!("{prefix}.bn"), y)?;
    s.tape.add(x, y)
}

fn attention_vars<T: Scalar>(s: &Session<'_, T>, prefix: &str) -> Result<AttentionVars> {
    let p = |proj: &str, kind: &str| s.p(&format!("{prefix}.{proj}.{kind}"));
    Ok(AttentionVars {
        w_q: p("q", "weight")?,
        w_k: p("k", "weight")?,
        w_v: p("v", "weight")?,
        b_q: p("q", "bias")?,
        b_k: p("k", "bias")?,
        b_v: p("v", "bias")?,
        w_o: p("o", "weight")?,
        b_o: p("o", "bias")?,
    })
}

/// One transformer block: `x1 = x + attn(ln(cpe(x)))`, `out = x1 + mlp(ln(x1))`.
#[allow(clippy::too_many_arguments)]
pub fn block<T: Scalar>(
    s: &Session<'_, T>,
    geo: &Geometry,
    prefix: &str,
    x: Var,
    depth: u32,
    dilation: usize,
    heads: usize,
    cfg: &NetworkConfig,
) -> Result<Var> {
    check_rows(s, geo, x, depth)?;
    let pe = if cfg.use_cpe {
        positional_encoding(s, geo, &format!("{prefix}.cpe"), x, depth)?
    } else {
        x
    };
    let h = s.layer_norm(&format!("{prefix}.norm1"), pe)?;
    let plan = geo.plan(depth, cfg.point_number, dilation)?;
    let a = attention_tape(s.tape, h, &attention_vars(s, &format!("{prefix}.attn"))?, plan, heads)?;
    let x1 = s.tape.add(x, a)?;
    let h = s.layer_norm(&format!("{prefix}.norm2"), x1)?;
    let h = s.linear(&format!("{prefix}.mlp.fc1"), h)?;
    let h = s.tape.gelu(h)?;
    let h = s.linear(&format!("{prefix}.mlp.fc2"), h)?;
    s.tape.add(x1, h)
}

/// Kernel-2 stride-2 convolution and batch norm from `depth` to `depth - 1`.
pub fn downsample<T: Scalar>(s: &Session<'_, T>, geo: &Geometry, prefix: &str, x: Var, depth: u32) -> Result<Var> {
    let table = geo.table(depth, 2, 2)?;
    let y = s.conv(&format!("{prefix}.conv"), x, &table)?;
    s.batch_norm(&format!("{prefix}.bn"), y)
}

pub fn backbone<T: Scalar>(s: &Session<'_, T>, geo: &Geometry, x: Var, cfg: &NetworkConfig) -> Result<FeaturePyramid> {
    cfg.validate()?;
    if geo.octree.depth() != cfg.octree_depth {
        return Err(Error::Config(format!(
            "octree depth {} differs from the configured {}",
            geo.octree.depth(),
            cfg.octree_depth
        )));
    }
    let depths = cfg.stage_depths();
    let heads = cfg.stage_heads();
    let mut y = embedding(s, geo, x)?;
    let mut levels = [y; 4];
    for st in 0..4 {
        for b in 0..cfg.block_counts[st] {
            y = block(
                s,
                geo,
                &format!("stages.{st}.blocks.{b}"),
                y,
                depths[st],
                cfg.block_dilation(b),
                heads[st],
                cfg,
            )?;
        }
        levels[st] = y;
        if st < 3 {
            y = downsample(s, geo, &format!("stages.{st}.down"), y, depths[st])?;
        }
    }
    Ok(FeaturePyramid { levels, depths })
}

/// Top-down pyramid merge, smoothing convolution, nearest interpolation to the
/// input points and a per-point MLP. Returns `(points, classes)` logits.
pub fn segmentation_head<T: Scalar>(
    s: &Session<'_, T>,
    geo: &Geometry,
    pyr: &FeaturePyramid,
) -> Result<Var> {
    for (i, (&v, &d)) in pyr.levels.iter().zip(&pyr.depths).enumerate() {
        check_rows(s, geo, v, d).map_err(|e| shape_err(format!("pyramid level {i}: {e}")))?;
    }
    let mut p = s.linear("seg.lateral.3", pyr.levels[3])?;
    for i in (0..3).rev() {
        let up = s.tape.gather_rows(p, geo.octree.parents(pyr.depths[i])?.into())?;
        let lat = s.linear(&format!("seg.lateral.{i}"), pyr.levels[i])?;
        p = s.tape.add(lat, up)?;
    }
    let table = geo.table(pyr.depths[0], 3, 1)?;
    p = s.conv("seg.smooth.conv", p, &table)?;
    p = s.batch_norm("seg.smooth.bn", p)?;
    p = s.tape.relu(p)?;
    let pts = s.tape.gather_rows(p, geo.point_nodes(pyr.depths[0])?)?;
    let h = s.linear("seg.mlp.fc1", pts)?;
    let h = s.batch_norm("seg.mlp.bn", h)?;
    let h = s.tape.relu(h)?;
    s.linear("seg.mlp.fc2", h)
}

/// Mean of the coarsest level followed by a linear classifier: `(1, classes)`.
pub fn classification_head<T: Scalar>(s: &Session<'_, T>, pyr: &FeaturePyramid) -> Result<Var> {
    let g = s.tape.mean_rows(pyr.levels[3])?;
    s.linear("cls.fc", g)
}

/// Full network from leaf features to logits.
pub fn forward<T: Scalar>(s: &Session<'_, T>, geo: &Geometry, x: Var, cfg: &NetworkConfig) -> Result<Var> {
    let pyr = backbone(s, geo, x, cfg)?;
    match cfg.task {
        Task::Segmentation => segmentation_head(s, geo, &pyr),
        Task::Classification => classification_head(s, &pyr),
    }
}
