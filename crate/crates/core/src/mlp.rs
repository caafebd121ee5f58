//! The testbed network: a ReLU MLP with a softmax head.
//!
//! One shared implementation of forward, loss, and backprop serves training,
//! evaluation, activation capture, and coefficient optimization. Parameters
//! are stored as f32 checkpoints but all arithmetic here runs in f64 so
//! analytic gradients agree with central finite differences to tight
//! tolerances.

use std::collections::BTreeMap;

use crate::checkpoint::{Checkpoint, CheckpointKind, Manifest, ManifestEntry, Role};
use crate::error::{Error, Result};
use crate::taskvec::LORA_ALPHA;
use crate::tensor::Tensor;

/// Architecture description: `hidden_layers` ReLU layers of `hidden_width`
/// units, then a linear head over `n_classes`. The manifest assigns hidden
/// layers depths 1..=hidden_layers and the head the final depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpArch {
    pub input_dim: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub n_classes: usize,
}

impl Default for MlpArch {
    fn default() -> Self {
        MlpArch {
            input_dim: 16,
            hidden_layers: 4,
            hidden_width: 32,
            n_classes: 4,
        }
    }
}

impl MlpArch {
    /// Total linear layers including the head; equals the manifest layer count.
    pub fn depth_count(&self) -> usize {
        self.hidden_layers + 1
    }

    /// (out, in) dims of the linear layer at depth index 0..depth_count.
    pub fn layer_dims(&self, idx: usize) -> (usize, usize) {
        let inp = if idx == 0 {
            self.input_dim
        } else {
            self.hidden_width
        };
        let out = if idx == self.hidden_layers {
            self.n_classes
        } else {
            self.hidden_width
        };
        (out, inp)
    }

    pub fn layer_prefix(&self, idx: usize) -> String {
        if idx == self.hidden_layers {
            "head".to_string()
        } else {
            format!("layers.{}", idx + 1)
        }
    }

    pub fn weight_name(&self, idx: usize) -> String {
        format!("{}.weight", self.layer_prefix(idx))
    }

    pub fn bias_name(&self, idx: usize) -> String {
        format!("{}.bias", self.layer_prefix(idx))
    }

    pub fn manifest(&self) -> Manifest {
        let mut entries = Vec::new();
        for idx in 0..self.depth_count() {
            let (out, inp) = self.layer_dims(idx);
            let head = idx == self.hidden_layers;
            entries.push(ManifestEntry {
                name: self.weight_name(idx),
                shape: vec![out, inp],
                role: if head { Role::HeadWeight } else { Role::Weight },
                depth: idx + 1,
            });
            entries.push(ManifestEntry {
                name: self.bias_name(idx),
                shape: vec![out],
                role: if head { Role::HeadBias } else { Role::Bias },
                depth: idx + 1,
            });
        }
        Manifest {
            layer_count: self.depth_count(),
            entries,
        }
    }

    /// Manifest of a low-rank expert: the dense entries plus factor pairs
    /// `<prefix>.lora_a` (r×in) and `<prefix>.lora_b` (out×r) per weight.
    pub fn lowrank_manifest(&self, rank: usize) -> Manifest {
        let mut m = self.manifest();
        for idx in 0..self.depth_count() {
            let (out, inp) = self.layer_dims(idx);
            let prefix = self.layer_prefix(idx);
            m.entries.push(ManifestEntry {
                name: format!("{prefix}.lora_a"),
                shape: vec![rank, inp],
                role: Role::LowrankA,
                depth: idx + 1,
            });
            m.entries.push(ManifestEntry {
                name: format!("{prefix}.lora_b"),
                shape: vec![out, rank],
                role: Role::LowrankB,
                depth: idx + 1,
            });
        }
        m
    }

    /// Recovers the architecture from a checkpoint manifest.
    pub fn from_manifest(m: &Manifest) -> Result<MlpArch> {
        let head = m
            .entries
            .iter()
            .find(|e| e.role == Role::HeadWeight)
            .ok_or_else(|| Error::validation("manifest has no head weight"))?;
        let first = m
            .entries
            .iter()
            .find(|e| e.role == Role::Weight && e.depth == 1);
        let arch = match first {
            Some(first) => MlpArch {
                input_dim: first.shape[1],
                hidden_layers: m.layer_count - 1,
                hidden_width: first.shape[0],
                n_classes: head.shape[0],
            },
            // Head-only network: a single linear layer.
            None => MlpArch {
                input_dim: head.shape[1],
                hidden_layers: 0,
                hidden_width: head.shape[1],
                n_classes: head.shape[0],
            },
        };
        // The dense entries must match exactly; merging semantics depend on it.
        let expect = arch.manifest();
        let dense: Vec<&ManifestEntry> = m.dense_entries().collect();
        if dense.len() != expect.entries.len()
            || dense.iter().zip(&expect.entries).any(|(a, b)| *a != b)
        {
            return Err(Error::validation(
                "manifest does not describe a testbed MLP",
            ));
        }
        Ok(arch)
    }
}

/// f64 working parameters, indexed by depth (head last).
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub arch: MlpArch,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpParams {
    pub fn zeros_like(&self) -> MlpParams {
        MlpParams {
            arch: self.arch,
            weights: self.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: self.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    /// Lifts a checkpoint into f64 working form; low-rank factor pairs are
    /// folded into their parent weights at scale LORA_ALPHA / r.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<MlpParams> {
        let arch = MlpArch::from_manifest(&ck.manifest)?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for idx in 0..arch.depth_count() {
            let w = ck.tensor(&arch.weight_name(idx))?;
            let b = ck.tensor(&arch.bias_name(idx))?;
            let mut wd: Vec<f64> = w.data().iter().map(|&v| v as f64).collect();
            let (out, inp) = arch.layer_dims(idx);
            let prefix = arch.layer_prefix(idx);
            if let Ok(a) = ck.tensor(&format!("{prefix}.lora_a")) {
                let bf = ck.tensor(&format!("{prefix}.lora_b"))?;
                let r = a.shape()[0];
                let scale = LORA_ALPHA / r as f64;
                for i in 0..out {
                    for j in 0..inp {
                        let mut acc = 0.0;
                        for c in 0..r {
                            acc += bf.data()[i * r + c] as f64 * a.data()[c * inp + j] as f64;
                        }
                        wd[i * inp + j] += scale * acc;
                    }
                }
            }
            weights.push(wd);
            biases.push(b.data().iter().map(|&v| v as f64).collect());
        }
        Ok(MlpParams {
            arch,
            weights,
            biases,
        })
    }

    /// Narrows back to an f32 checkpoint with the dense manifest.
    pub fn to_checkpoint(&self, kind: CheckpointKind, source_tag: &str) -> Result<Checkpoint> {
        let manifest = self.arch.manifest();
        let mut tensors = BTreeMap::new();
        for idx in 0..self.arch.depth_count() {
            let (out, inp) = self.arch.layer_dims(idx);
            tensors.insert(
                self.arch.weight_name(idx),
                Tensor::from_f64(vec![out, inp], &self.weights[idx])?,
            );
            tensors.insert(
                self.arch.bias_name(idx),
                Tensor::from_f64(vec![out], &self.biases[idx])?,
            );
        }
        Ok(Checkpoint {
            manifest,
            tensors,
            kind,
            source_tag: source_tag.to_string(),
        })
    }
}

/// Forward-pass record: the input matrix of every linear layer plus the
/// softmax output. `layer_inputs[l]` is n×in_l row-major.
#[derive(Debug, Clone)]
pub struct Forward {
    pub layer_inputs: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub n: usize,
}

/// Runs the network on a batch of rows (n × input_dim).
pub fn forward(params: &MlpParams, x: &[f64], n: usize) -> Forward {
    let arch = &params.arch;
    debug_assert_eq!(x.len(), n * arch.input_dim);
    let mut layer_inputs = Vec::with_capacity(arch.depth_count());
    let mut cur = x.to_vec();
    for idx in 0..arch.depth_count() {
        let (out, inp) = arch.layer_dims(idx);
        layer_inputs.push(cur.clone());
        let mut next = vec![0.0f64; n * out];
        let w = &params.weights[idx];
        let b = &params.biases[idx];
        for s in 0..n {
            let row = &cur[s * inp..(s + 1) * inp];
            let orow = &mut next[s * out..(s + 1) * out];
            for o in 0..out {
                let wrow = &w[o * inp..(o + 1) * inp];
                let mut acc = b[o];
                for j in 0..inp {
                    acc += wrow[j] * row[j];
                }
                orow[o] = acc;
            }
        }
        if idx < arch.hidden_layers {
            for v in next.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        cur = next;
    }
    let logits = cur;
    let probs = softmax_rows(&logits, n, arch.n_classes);
    Forward {
        layer_inputs,
        logits,
        probs,
        n,
    }
}

pub fn softmax_rows(logits: &[f64], n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; n * k];
    for s in 0..n {
        let row = &logits[s * k..(s + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..k {
            let e = (row[j] - max).exp();
            out[s * k + j] = e;
            z += e;
        }
        for j in 0..k {
            out[s * k + j] /= z;
        }
    }
    out
}

/// Mean softmax cross-entropy of a labelled batch.
pub fn cross_entropy(probs: &[f64], labels: &[usize], k: usize) -> f64 {
    let n = labels.len();
    let mut loss = 0.0;
    for (s, &y) in labels.iter().enumerate() {
        loss -= probs[s * k + y].max(1e-300).ln();
    }
    loss / n as f64
}

/// dLoss/dlogits for mean cross-entropy: (p − onehot(y)) / n.
pub fn ce_logit_grad(probs: &[f64], labels: &[usize], k: usize) -> Vec<f64> {
    let n = labels.len();
    let mut g = probs.to_vec();
    for (s, &y) in labels.iter().enumerate() {
        g[s * k + y] -= 1.0;
    }
    for v in g.iter_mut() {
        *v /= n as f64;
    }
    g
}

/// Mean Shannon entropy of the output distributions, −∑ p ln p averaged
/// over the batch.
pub fn mean_entropy(probs: &[f64], n: usize, k: usize) -> f64 {
    let mut total = 0.0;
    for s in 0..n {
        for j in 0..k {
            let p = probs[s * k + j];
            if p > 0.0 {
                total -= p * p.ln();
            }
        }
    }
    total / n as f64
}

/// dMeanEntropy/dlogits: per sample, −p_j (ln p_j + H) / n.
pub fn entropy_logit_grad(probs: &[f64], n: usize, k: usize) -> Vec<f64> {
    let mut g = vec![0.0f64; n * k];
    for s in 0..n {
        let row = &probs[s * k..(s + 1) * k];
        let h: f64 = row
            .iter()
            .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
            .sum();
        for j in 0..k {
            let p = row[j];
            let lnp = if p > 0.0 { p.ln() } else { 0.0 };
            g[s * k + j] = -p * (lnp + h) / n as f64;
        }
    }
    g
}

/// Backpropagates an arbitrary logit gradient to parameter gradients.
pub fn backward(params: &MlpParams, fwd: &Forward, logit_grad: &[f64]) -> MlpParams {
    let arch = &params.arch;
    let n = fwd.n;
    let mut grads = params.zeros_like();
    let mut dz = logit_grad.to_vec();
    for idx in (0..arch.depth_count()).rev() {
        let (out, inp) = arch.layer_dims(idx);
        let x = &fwd.layer_inputs[idx];
        let gw = &mut grads.weights[idx];
        let gb = &mut grads.biases[idx];
        for s in 0..n {
            let drow = &dz[s * out..(s + 1) * out];
            let xrow = &x[s * inp..(s + 1) * inp];
            for o in 0..out {
                let d = drow[o];
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                let grow = &mut gw[o * inp..(o + 1) * inp];
                for j in 0..inp {
                    grow[j] += d * xrow[j];
                }
            }
        }
        if idx > 0 {
            // Push through the previous ReLU: gate on the (post-activation)
            // layer input being strictly positive.
            let w = &params.weights[idx];
            let mut dx = vec![0.0f64; n * inp];
            for s in 0..n {
                let drow = &dz[s * out..(s + 1) * out];
                let xrow = &x[s * inp..(s + 1) * inp];
                let dxrow = &mut dx[s * inp..(s + 1) * inp];
                for o in 0..out {
                    let d = drow[o];
                    if d == 0.0 {
                        continue;
                    }
                    let wrow = &w[o * inp..(o + 1) * inp];
                    for j in 0..inp {
                        dxrow[j] += d * wrow[j];
                    }
                }
                for j in 0..inp {
                    if xrow[j] <= 0.0 {
                        dxrow[j] = 0.0;
                    }
                }
            }
            dz = dx;
        }
    }
    grads
}

/// Argmax class per row; ties resolve to the lowest index.
pub fn predict(probs: &[f64], n: usize, k: usize) -> Vec<usize> {
    (0..n)
        .map(|s| {
            let row = &probs[s * k..(s + 1) * k];
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
