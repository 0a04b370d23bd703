//! Forward graph construction. All stages are batched: sample rows move
//! through (M, width) matrices, and AU-indexed stages carry one matrix per
//! graph node, aligned with the graph's node order.

use super::{AttentionKind, FusionKind, ModelConfig, ModelError, ModelParams};
use crate::diffcore::Tensor;

/// Everything a forward pass produces, kept alive so losses can extend the
/// graph and `backward` can reach the parameters.
pub struct ForwardOutput {
    /// Global facial features, (M, d).
    pub z: Tensor,
    /// Per-AU gated features, K matrices of (M, d) in graph node order.
    pub au_features: Vec<Tensor>,
    /// Detection probabilities, (M, K).
    pub au_probs: Tensor,
    /// Sumpooled relational feature, (M, d2).
    pub z_r: Tensor,
    /// Projected sumpooled AU feature, (M, d2).
    pub z_o: Tensor,
    /// Fused feature entering the classifier, (M, d2) or (M, 2 d2).
    pub fused: Tensor,
    /// Class scores, (M, C).
    pub logits: Tensor,
    /// Row-wise softmax of the logits, (M, C).
    pub class_probs: Tensor,
}

/// x (M, in) * w (in, out) + b (1, out) broadcast over rows.
fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, ModelError> {
    let y = x.matmul(w)?;
    let m = y.shape()[0];
    if m == 1 {
        Ok(y.add(b)?)
    } else {
        let ones = Tensor::constant(&[m, 1], vec![1.0; m]);
        Ok(y.add(&ones.matmul(b)?)?)
    }
}

/// Extract flow channel `c` as a (1, H, W) tensor via a selector product.
fn flow_channel(flow: &Tensor, c: usize, h: usize, w: usize) -> Result<Tensor, ModelError> {
    let mut sel = vec![0.0; 2];
    sel[c] = 1.0;
    let selector = Tensor::constant(&[1, 2], sel);
    let flat = flow.reshape(&[2, h * w])?;
    Ok(selector.matmul(&flat)?.reshape(&[1, h, w])?)
}

/// One backbone path: conv3x3 -> relu -> pool2 -> conv3x3 -> relu -> pool2,
/// flattened to a (1, flat) row.
fn backbone_path(
    channel: &Tensor,
    params: &ModelParams,
    path: usize,
) -> Result<Tensor, ModelError> {
    let w1 = params.theta.expect(&format!("backbone.path{path}.conv1.weight"));
    let b1 = params.theta.expect(&format!("backbone.path{path}.conv1.bias"));
    let w2 = params.theta.expect(&format!("backbone.path{path}.conv2.weight"));
    let b2 = params.theta.expect(&format!("backbone.path{path}.conv2.bias"));
    let stage1 = channel.conv2d(w1, Some(b1), 1, 1)?.relu().max_pool2d(2)?;
    let stage2 = stage1.conv2d(w2, Some(b2), 1, 1)?.relu().max_pool2d(2)?;
    let flat = stage2.numel();
    Ok(stage2.reshape(&[1, flat])?)
}

/// Global feature extraction: each flow component runs its own conv path,
/// the two flattened maps are concatenated, and a fully connected layer maps
/// the result to the d-wide global feature. Returns (M, d).
pub fn backbone_forward(
    flows: &[Tensor],
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Tensor, ModelError> {
    if flows.is_empty() {
        return Err(ModelError::BadInput("empty batch".into()));
    }
    let (h, w) = (config.input_height, config.input_width);
    let mut rows = Vec::with_capacity(flows.len());
    for flow in flows {
        if flow.shape() != [2, h, w] {
            return Err(ModelError::BadInput(format!(
                "flow shape {:?}, expected [2, {h}, {w}]",
                flow.shape()
            )));
        }
        let u = flow_channel(flow, 0, h, w)?;
        let v = flow_channel(flow, 1, h, w)?;
        let f0 = backbone_path(&u, params, 0)?;
        let f1 = backbone_path(&v, params, 1)?;
        rows.push(Tensor::concat(&[f0, f1], 1)?);
    }
    let stacked = Tensor::concat(&rows, 0)?;
    linear(
        &stacked,
        params.theta.expect("backbone.fc.weight"),
        params.theta.expect("backbone.fc.bias"),
    )
}

/// Per-AU gated features: row k is gate_k(z) (.) z where the gate is the
/// sigmoid (or, for the ablation, a softmax over feature positions) of that
/// head's affine map.
pub fn attention_au_features(
    z: &Tensor,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Vec<Tensor>, ModelError> {
    let mut features = Vec::with_capacity(config.au_count);
    for k in 0..config.au_count {
        let w = params.theta.expect(&format!("att.{k:02}.weight"));
        let b = params.theta.expect(&format!("att.{k:02}.bias"));
        let pre = linear(z, w, b)?;
        let gate = match config.attention {
            AttentionKind::Sigmoid => pre.sigmoid(),
            AttentionKind::Softmax => pre.softmax()?,
        };
        features.push(gate.mul(z)?);
    }
    Ok(features)
}

/// Detection probabilities from the per-AU perceptrons, (M, K) in graph node
/// order.
pub fn au_detect(
    au_features: &[Tensor],
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Tensor, ModelError> {
    let mut columns = Vec::with_capacity(config.au_count);
    for (k, x) in au_features.iter().enumerate() {
        let hw = params.theta.expect(&format!("det.{k:02}.hidden.weight"));
        let hb = params.theta.expect(&format!("det.{k:02}.hidden.bias"));
        let ow = params.theta.expect(&format!("det.{k:02}.out.weight"));
        let ob = params.theta.expect(&format!("det.{k:02}.out.bias"));
        let hidden = linear(x, hw, hb)?.relu();
        columns.push(linear(&hidden, ow, ob)?.sigmoid());
    }
    Ok(Tensor::concat(&columns, 1)?)
}

/// Two propagation layers over the AU graph:
/// Z1 = relu(G X W0), Z2 = relu(G Z1 W1). `adjacency` is the row-major
/// K x K matrix; entries may be real-valued when normalization is on.
pub fn gcn_forward(
    au_features: &[Tensor],
    adjacency: &[f64],
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Vec<Tensor>, ModelError> {
    let k = config.au_count;
    if au_features.len() != k || adjacency.len() != k * k {
        return Err(ModelError::BadInput(format!(
            "{} AU features / adjacency of {} entries for K={k}",
            au_features.len(),
            adjacency.len()
        )));
    }
    let layer = |inputs: &[Tensor], weight: &Tensor| -> Result<Vec<Tensor>, ModelError> {
        let projected: Vec<Tensor> = inputs
            .iter()
            .map(|x| x.matmul(weight))
            .collect::<Result<_, _>>()?;
        let mut mixed = Vec::with_capacity(k);
        for row in 0..k {
            let mut acc: Option<Tensor> = None;
            for (col, p) in projected.iter().enumerate() {
                let g = adjacency[row * k + col];
                if g == 0.0 {
                    continue;
                }
                let term = if g == 1.0 { p.clone() } else { p.scale(g) };
                acc = Some(match acc {
                    Some(a) => a.add(&term)?,
                    None => term,
                });
            }
            let acc = acc.ok_or_else(|| {
                ModelError::BadInput(format!("adjacency row {row} is all zero"))
            })?;
            mixed.push(acc.relu());
        }
        Ok(mixed)
    };
    let z1 = layer(au_features, params.phi.expect("gcn.w0"))?;
    layer(&z1, params.phi.expect("gcn.w1"))
}

/// Sumpool both stacks and fuse: z_r is the node-wise sum of the relational
/// features, z_o the projection of the node-wise sum of the AU features.
/// Returns (z_o, z_r, fused).
pub fn aggregate_and_fuse(
    au_features: &[Tensor],
    relational: &[Tensor],
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<(Tensor, Tensor, Tensor), ModelError> {
    let sum_stack = |stack: &[Tensor]| -> Result<Tensor, ModelError> {
        let mut acc = stack[0].clone();
        for t in &stack[1..] {
            acc = acc.add(t)?;
        }
        Ok(acc)
    };
    let z_r = sum_stack(relational)?;
    let pooled = sum_stack(au_features)?;
    let z_o = linear(
        &pooled,
        params.phi.expect("fuse.proj.weight"),
        params.phi.expect("fuse.proj.bias"),
    )?;
    let fused = match config.fusion {
        FusionKind::Sum => z_o.add(&z_r)?,
        FusionKind::Concat => Tensor::concat(&[z_o.clone(), z_r.clone()], 1)?,
    };
    Ok((z_o, z_r, fused))
}

/// Class head: affine map plus row-wise softmax.
pub fn classify(
    fused: &Tensor,
    params: &ModelParams,
) -> Result<(Tensor, Tensor), ModelError> {
    let logits = linear(
        fused,
        params.phi.expect("classifier.weight"),
        params.phi.expect("classifier.bias"),
    )?;
    let probs = logits.softmax()?;
    Ok((logits, probs))
}

/// The whole pipeline for one batch of (2, H, W) flow tensors.
pub fn model_forward(
    flows: &[Tensor],
    adjacency: &[f64],
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<ForwardOutput, ModelError> {
    let z = backbone_forward(flows, params, config)?;
    let au_features = attention_au_features(&z, params, config)?;
    let au_probs = au_detect(&au_features, params, config)?;
    let relational = gcn_forward(&au_features, adjacency, params, config)?;
    let (z_o, z_r, fused) = aggregate_and_fuse(&au_features, &relational, params, config)?;
    let (logits, class_probs) = classify(&fused, params)?;
    Ok(ForwardOutput {
        z,
        au_features,
        au_probs,
        z_r,
        z_o,
        fused,
        logits,
        class_probs,
    })
}
