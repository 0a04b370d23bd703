//! Named parameter tensors, their initialization, and the checkpoint format.
//!
//! Checkpoint layout: a UTF-8 header (format tag, config echo, tensor table)
//! terminated by a `[data]` line, then the raw little-endian f64 blobs in
//! table order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::{AttentionKind, FusionKind, ModelConfig, ModelError};
use crate::diffcore::Tensor;

const CHECKPOINT_TAG: &str = "AUGCN-CKPT v1";

/// Ordered name -> tensor collection; insertion order is the serialization
/// order and never changes for a given config.
#[derive(Debug, Clone, Default)]
pub struct ParamGroup {
    entries: Vec<(String, Tensor)>,
}

impl ParamGroup {
    fn push(&mut self, name: &str, tensor: Tensor) {
        debug_assert!(self.get(name).is_none(), "duplicate param {name}");
        self.entries.push((name.to_string(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Panicking lookup for names guaranteed by the shape schedule.
    pub fn expect(&self, name: &str) -> &Tensor {
        self.get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// All trainable tensors, split into the backbone/detection partition
/// (theta) and the aggregation/classifier partition (phi).
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub theta: ParamGroup,
    pub phi: ParamGroup,
}

impl ModelParams {
    /// Theta first, then phi; the canonical flat order.
    pub fn all(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.theta.iter().chain(self.phi.iter())
    }

    pub fn tensor_count(&self) -> usize {
        self.theta.len() + self.phi.len()
    }

    pub fn zero_grads(&self) {
        for (_, t) in self.all() {
            t.zero_grad();
        }
    }
}

/// The full shape schedule for a config: (partition, name, shape).
/// Everything that builds, checks, or loads parameters derives from this.
pub fn param_shapes(config: &ModelConfig) -> Vec<(&'static str, String, Vec<usize>)> {
    let d = config.feature_dim;
    let (c1, c2) = config.conv_channels;
    let flat = config.path_flat_dim();
    let h_det = config.detector_hidden;
    let mut shapes = Vec::new();
    for path in 0..2 {
        shapes.push((
            "theta",
            format!("backbone.path{path}.conv1.weight"),
            vec![c1, 1, 3, 3],
        ));
        shapes.push(("theta", format!("backbone.path{path}.conv1.bias"), vec![c1]));
        shapes.push((
            "theta",
            format!("backbone.path{path}.conv2.weight"),
            vec![c2, c1, 3, 3],
        ));
        shapes.push(("theta", format!("backbone.path{path}.conv2.bias"), vec![c2]));
    }
    shapes.push(("theta", "backbone.fc.weight".into(), vec![2 * flat, d]));
    shapes.push(("theta", "backbone.fc.bias".into(), vec![1, d]));
    for k in 0..config.au_count {
        shapes.push(("theta", format!("att.{k:02}.weight"), vec![d, d]));
        shapes.push(("theta", format!("att.{k:02}.bias"), vec![1, d]));
    }
    for k in 0..config.au_count {
        shapes.push(("theta", format!("det.{k:02}.hidden.weight"), vec![d, h_det]));
        shapes.push(("theta", format!("det.{k:02}.hidden.bias"), vec![1, h_det]));
        shapes.push(("theta", format!("det.{k:02}.out.weight"), vec![h_det, 1]));
        shapes.push(("theta", format!("det.{k:02}.out.bias"), vec![1, 1]));
    }
    shapes.push(("phi", "gcn.w0".into(), vec![config.feature_dim, config.gcn_hidden]));
    shapes.push(("phi", "gcn.w1".into(), vec![config.gcn_hidden, config.gcn_out]));
    shapes.push(("phi", "fuse.proj.weight".into(), vec![d, config.gcn_out]));
    shapes.push(("phi", "fuse.proj.bias".into(), vec![1, config.gcn_out]));
    shapes.push((
        "phi",
        "classifier.weight".into(),
        vec![config.fused_dim(), config.num_classes],
    ));
    shapes.push(("phi", "classifier.bias".into(), vec![1, config.num_classes]));
    shapes
}

fn fan_in(name: &str, shape: &[usize]) -> usize {
    if shape.len() == 4 {
        shape[1] * shape[2] * shape[3]
    } else {
        debug_assert!(shape.len() == 2, "unexpected weight rank for {name}");
        shape[0]
    }
}

/// Deterministic initialization: weights uniform with variance 1/fan_in
/// (bound sqrt(3/fan_in)), biases zero. Output heads (class logits, AU
/// detector outputs) start damped so their initial predictions are near
/// neutral regardless of feature scale.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams, ModelError> {
    config.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut theta = ParamGroup::default();
    let mut phi = ParamGroup::default();
    for (partition, name, shape) in param_shapes(config) {
        let numel: usize = shape.iter().product();
        let data = if name.ends_with("bias") {
            vec![0.0; numel]
        } else {
            let gain = if name == "classifier.weight" || name.ends_with("out.weight") {
                0.1
            } else {
                1.0
            };
            let bound = gain * (3.0 / fan_in(&name, &shape) as f64).sqrt();
            (0..numel).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        let tensor = Tensor::param(&shape, data);
        match partition {
            "theta" => theta.push(&name, tensor),
            _ => phi.push(&name, tensor),
        }
    }
    Ok(ModelParams { theta, phi })
}

fn config_header(config: &ModelConfig) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "input_height = {}", config.input_height);
    let _ = writeln!(out, "input_width = {}", config.input_width);
    let _ = writeln!(out, "feature_dim = {}", config.feature_dim);
    let _ = writeln!(out, "au_count = {}", config.au_count);
    let _ = writeln!(out, "gcn_hidden = {}", config.gcn_hidden);
    let _ = writeln!(out, "gcn_out = {}", config.gcn_out);
    let _ = writeln!(out, "num_classes = {}", config.num_classes);
    let _ = writeln!(out, "conv1_channels = {}", config.conv_channels.0);
    let _ = writeln!(out, "conv2_channels = {}", config.conv_channels.1);
    let _ = writeln!(out, "detector_hidden = {}", config.detector_hidden);
    let _ = writeln!(out, "attention = {}", config.attention.as_str());
    let _ = writeln!(out, "fusion = {}", config.fusion.as_str());
    let _ = writeln!(out, "normalize_adjacency = {}", config.normalize_adjacency);
    out
}

fn parse_config_lines(lines: &[(String, String)], path: &Path) -> Result<ModelConfig, ModelError> {
    let field = |key: &str| -> Result<String, ModelError> {
        lines
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| ModelError::Checkpoint {
                path: path.to_path_buf(),
                reason: format!("missing config key `{key}`"),
            })
    };
    let num = |key: &str| -> Result<usize, ModelError> {
        field(key)?.parse().map_err(|_| ModelError::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("bad numeric value for `{key}`"),
        })
    };
    Ok(ModelConfig {
        input_height: num("input_height")?,
        input_width: num("input_width")?,
        feature_dim: num("feature_dim")?,
        au_count: num("au_count")?,
        gcn_hidden: num("gcn_hidden")?,
        gcn_out: num("gcn_out")?,
        num_classes: num("num_classes")?,
        conv_channels: (num("conv1_channels")?, num("conv2_channels")?),
        detector_hidden: num("detector_hidden")?,
        attention: AttentionKind::parse(&field("attention")?).ok_or_else(|| {
            ModelError::Checkpoint {
                path: path.to_path_buf(),
                reason: "bad attention kind".into(),
            }
        })?,
        fusion: FusionKind::parse(&field("fusion")?).ok_or_else(|| ModelError::Checkpoint {
            path: path.to_path_buf(),
            reason: "bad fusion kind".into(),
        })?,
        normalize_adjacency: field("normalize_adjacency")? == "true",
    })
}

/// Write config echo, tensor table, and value blobs.
pub fn save_checkpoint(
    path: &Path,
    config: &ModelConfig,
    params: &ModelParams,
) -> Result<(), ModelError> {
    let mut header = String::new();
    let _ = writeln!(header, "{CHECKPOINT_TAG}");
    header.push_str("[config]\n");
    header.push_str(&config_header(config));
    header.push_str("[tensors]\n");
    let mut order: Vec<&Tensor> = Vec::new();
    for (partition, group) in [("theta", &params.theta), ("phi", &params.phi)] {
        for (name, tensor) in group.iter() {
            let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
            let _ = writeln!(header, "{partition} {name} {}", dims.join(" "));
            order.push(tensor);
        }
    }
    header.push_str("[data]\n");

    let total: usize = order.iter().map(|t| t.numel()).sum();
    let mut bytes = Vec::with_capacity(header.len() + 8 * total);
    bytes.extend_from_slice(header.as_bytes());
    for tensor in order {
        for &v in tensor.values().iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Read a checkpoint back; the tensor table must match the shape schedule
/// the embedded config implies.
pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams), ModelError> {
    let bytes = fs::read(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = |reason: String| ModelError::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let marker = b"[data]\n";
    let data_at = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| bad("missing [data] marker".into()))?;
    let header = std::str::from_utf8(&bytes[..data_at])
        .map_err(|_| bad("header is not UTF-8".into()))?;
    let blob = &bytes[data_at + marker.len()..];

    let mut lines = header.lines();
    if lines.next() != Some(CHECKPOINT_TAG) {
        return Err(bad("bad format tag".into()));
    }
    if lines.next() != Some("[config]") {
        return Err(bad("missing [config] section".into()));
    }
    let mut config_lines = Vec::new();
    let mut table_lines = Vec::new();
    let mut in_tensors = false;
    for line in lines {
        if line == "[tensors]" {
            in_tensors = true;
            continue;
        }
        if in_tensors {
            table_lines.push(line.to_string());
        } else if let Some((k, v)) = line.split_once('=') {
            config_lines.push((k.trim().to_string(), v.trim().to_string()));
        }
    }
    let config = parse_config_lines(&config_lines, path)?;

    let expected = param_shapes(&config);
    if table_lines.len() != expected.len() {
        return Err(bad(format!(
            "tensor table has {} rows, config implies {}",
            table_lines.len(),
            expected.len()
        )));
    }

    let mut theta = ParamGroup::default();
    let mut phi = ParamGroup::default();
    let mut cursor = 0usize;
    for (line, (partition, name, shape)) in table_lines.iter().zip(&expected) {
        let mut parts = line.split_whitespace();
        let got_partition = parts.next().unwrap_or_default();
        let got_name = parts.next().unwrap_or_default();
        let got_shape: Vec<usize> = parts.filter_map(|t| t.parse().ok()).collect();
        if got_partition != *partition || got_name != name || got_shape != *shape {
            return Err(bad(format!(
                "tensor row `{line}` does not match expected {partition} {name} {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        let end = cursor + 8 * numel;
        if end > blob.len() {
            return Err(bad("value blob shorter than tensor table".into()));
        }
        let data: Vec<f64> = blob[cursor..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        cursor = end;
        let tensor = Tensor::param(shape, data);
        match *partition {
            "theta" => theta.push(name, tensor),
            _ => phi.push(name, tensor),
        }
    }
    if cursor != blob.len() {
        return Err(bad(format!(
            "value blob has {} trailing bytes",
            blob.len() - cursor
        )));
    }
    Ok((config, ModelParams { theta, phi }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_reproduces_params() {
        let config = ModelConfig::tiny();
        let a = init_params(&config, 7).unwrap();
        let b = init_params(&config, 7).unwrap();
        for ((_, ta), (_, tb)) in a.all().zip(b.all()) {
            assert_eq!(ta.to_vec(), tb.to_vec());
        }
    }

    #[test]
    fn different_seeds_differ_somewhere() {
        let config = ModelConfig::tiny();
        let a = init_params(&config, 1).unwrap();
        let b = init_params(&config, 2).unwrap();
        let differs = a
            .all()
            .zip(b.all())
            .any(|((_, ta), (_, tb))| ta.to_vec() != tb.to_vec());
        assert!(differs);
    }

    #[test]
    fn shapes_follow_schedule_and_biases_are_zero() {
        let config = ModelConfig::tiny();
        let params = init_params(&config, 3).unwrap();
        let schedule = param_shapes(&config);
        assert_eq!(params.tensor_count(), schedule.len());
        for ((partition, name, shape), (got_name, tensor)) in schedule.iter().zip(params.all()) {
            assert_eq!(name, got_name);
            assert_eq!(tensor.shape(), shape.as_slice());
            let in_theta = params.theta.get(name).is_some();
            assert_eq!(*partition == "theta", in_theta);
            if name.ends_with("bias") {
                assert!(tensor.to_vec().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn checkpoint_round_trips_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let config = ModelConfig::tiny();
        let params = init_params(&config, 11).unwrap();
        save_checkpoint(&path, &config, &params).unwrap();
        let (config2, params2) = load_checkpoint(&path).unwrap();
        assert_eq!(config, config2);
        for ((na, ta), (nb, tb)) in params.all().zip(params2.all()) {
            assert_eq!(na, nb);
            let (va, vb) = (ta.to_vec(), tb.to_vec());
            assert_eq!(va.len(), vb.len());
            for (a, b) in va.iter().zip(&vb) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        // Saving the loaded params reproduces the file byte for byte.
        let path2 = dir.path().join("model2.ckpt");
        save_checkpoint(&path2, &config2, &params2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupted_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let config = ModelConfig::tiny();
        let params = init_params(&config, 11).unwrap();
        save_checkpoint(&path, &config, &params).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(ModelError::Checkpoint { .. })
        ));
    }
}
