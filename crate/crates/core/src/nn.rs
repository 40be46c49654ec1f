//! Minimal dense-layer toolkit with hand-written backward passes.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { rows: rows.len(), cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Sparse row-normalised propagation matrix `D^{-1/2}(A+I)D^{-1/2}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Propagation {
    rows: Vec<Vec<(usize, f64)>>,
}

impl Propagation {
    /// `adjacency[i]` lists the neighbours of `i` (without `i` itself).
    pub fn symmetric_normalized(adjacency: &[Vec<usize>]) -> Self {
        let deg: Vec<f64> = adjacency.iter().map(|n| n.len() as f64 + 1.0).collect();
        let rows = adjacency
            .iter()
            .enumerate()
            .map(|(i, nbrs)| {
                let mut r = Vec::with_capacity(nbrs.len() + 1);
                r.push((i, 1.0 / deg[i]));
                for &j in nbrs {
                    r.push((j, 1.0 / (deg[i] * deg[j]).sqrt()));
                }
                r
            })
            .collect();
        Self { rows }
    }

    pub fn apply(&self, x: &Mat) -> Mat {
        let mut out = Mat::zeros(x.rows, x.cols);
        for (i, r) in self.rows.iter().enumerate() {
            let dst = &mut out.data[i * x.cols..(i + 1) * x.cols];
            for &(j, w) in r {
                for (d, s) in dst.iter_mut().zip(x.row(j)) {
                    *d += w * s;
                }
            }
        }
        out
    }
}

/// Fully connected layer `y = x W + b` with `W` stored `in × out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub input: usize,
    pub output: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self { input, output, w: vec![0.0; input * output], b: vec![0.0; output] }
    }

    /// Uniform Glorot init, zero bias.
    pub fn glorot<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let w = (0..input * output).map(|_| rng.random_range(-limit..limit)).collect();
        Self { input, output, w, b: vec![0.0; output] }
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn forward_row(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.b.clone();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let w = &self.w[i * self.output..(i + 1) * self.output];
            for (yo, wo) in y.iter_mut().zip(w) {
                *yo += xi * wo;
            }
        }
        y
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        let mut out = Mat::zeros(x.rows, self.output);
        for r in 0..x.rows {
            out.row_mut(r).copy_from_slice(&self.forward_row(x.row(r)));
        }
        out
    }

    /// Accumulate parameter gradients for one row and return `dL/dx`.
    pub fn backward_row(&self, x: &[f64], dy: &[f64], grad: &mut Dense) -> Vec<f64> {
        let mut dx = vec![0.0; self.input];
        for (i, &xi) in x.iter().enumerate() {
            let w = &self.w[i * self.output..(i + 1) * self.output];
            let gw = &mut grad.w[i * self.output..(i + 1) * self.output];
            let mut acc = 0.0;
            for o in 0..self.output {
                gw[o] += xi * dy[o];
                acc += w[o] * dy[o];
            }
            dx[i] = acc;
        }
        for (gb, d) in grad.b.iter_mut().zip(dy) {
            *gb += d;
        }
        dx
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.w);
        out.extend_from_slice(&self.b);
    }

    /// Read parameters back from `flat`, returning the unread tail.
    pub fn unflatten_from<'a>(&mut self, flat: &'a [f64]) -> &'a [f64] {
        let (w, rest) = flat.split_at(self.w.len());
        self.w.copy_from_slice(w);
        let (b, rest) = rest.split_at(self.b.len());
        self.b.copy_from_slice(b);
        rest
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Softmax restricted to `allowed` entries; masked entries get 0.
pub fn masked_softmax(scores: &[f64], allowed: &[bool]) -> Vec<f64> {
    let max = scores
        .iter()
        .zip(allowed)
        .filter(|(_, &a)| a)
        .map(|(s, _)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![0.0; scores.len()];
    }
    let mut out: Vec<f64> = scores
        .iter()
        .zip(allowed)
        .map(|(s, &a)| if a { (s - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = out.iter().sum();
    for p in &mut out {
        *p /= z;
    }
    out
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    masked_softmax(scores, &vec![true; scores.len()])
}

/// Log-probability of drawing `chosen` in order without replacement from
/// successive masked softmaxes, and its gradient w.r.t. `scores`.
pub fn sequential_log_prob(scores: &[f64], allowed: &[bool], chosen: &[usize]) -> (f64, Vec<f64>) {
    let mut mask = allowed.to_vec();
    let mut grad = vec![0.0; scores.len()];
    let mut logp = 0.0;
    for &c in chosen {
        debug_assert!(mask[c], "chosen index must be available");
        let probs = masked_softmax(scores, &mask);
        logp += probs[c].ln();
        for (g, p) in grad.iter_mut().zip(&probs) {
            *g -= p;
        }
        grad[c] += 1.0;
        mask[c] = false;
    }
    (logp, grad)
}

/// Draw up to `k` distinct indices from successive masked softmaxes.
pub fn sample_without_replacement<R: Rng>(scores: &[f64], allowed: &[bool], k: usize, rng: &mut R) -> Vec<usize> {
    let mut mask = allowed.to_vec();
    let mut out = Vec::new();
    while out.len() < k && mask.iter().any(|&m| m) {
        let probs = masked_softmax(scores, &mask);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = None;
        for (i, p) in probs.iter().enumerate() {
            if mask[i] {
                acc += p;
                pick = Some(i);
                if u < acc {
                    break;
                }
            }
        }
        let pick = pick.expect("at least one allowed entry");
        out.push(pick);
        mask[pick] = false;
    }
    out
}

/// Top-`k` allowed indices by descending score; ties go to the smaller key.
pub fn top_k<K: Ord + Copy>(scores: &[f64], allowed: &[bool], keys: &[K], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&i| allowed[i]).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(keys[a].cmp(&keys[b])));
    idx.truncate(k);
    idx
}

/// Adam on a flat parameter vector. `step` descends; pass a negated
/// gradient to ascend.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(learning_rate: f64, params: usize) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; params], v: vec![0.0; params], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.learning_rate * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Versioned text table of named flat parameter vectors.
pub fn params_to_text(kind: &str, fingerprint: &str, header: &[(&str, String)], blocks: &[(&str, Vec<f64>)]) -> String {
    use std::fmt::Write as _;
    let mut out = format!("# {kind} v1\nfingerprint={fingerprint}\n");
    let hdr: Vec<String> = header.iter().map(|(k, v)| format!("{k}={v}")).collect();
    let _ = writeln!(out, "{}", hdr.join(" "));
    for (name, vals) in blocks {
        let _ = write!(out, "{name}\t{}\t", vals.len());
        let body: Vec<String> = vals.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(out, "{}", body.join(" "));
    }
    out
}

/// Parsed form of [`params_to_text`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamText {
    pub fingerprint: String,
    pub header: std::collections::BTreeMap<String, String>,
    pub blocks: Vec<(String, Vec<f64>)>,
}

pub fn params_from_text(kind: &str, text: &str) -> Result<ParamText, String> {
    let mut lines = text.lines();
    if lines.next() != Some(format!("# {kind} v1").as_str()) {
        return Err(format!("expected `# {kind} v1` header"));
    }
    let fingerprint = lines
        .next()
        .and_then(|l| l.strip_prefix("fingerprint="))
        .ok_or("missing fingerprint")?
        .to_string();
    let mut header = std::collections::BTreeMap::new();
    for part in lines.next().ok_or("missing header")?.split_whitespace() {
        let (k, v) = part.split_once('=').ok_or("malformed header")?;
        header.insert(k.to_string(), v.to_string());
    }
    let mut blocks = Vec::new();
    for line in lines {
        let mut cols = line.splitn(3, '\t');
        let name = cols.next().ok_or("missing block name")?;
        let len: usize = cols.next().and_then(|c| c.parse().ok()).ok_or("missing block length")?;
        let body = cols.next().unwrap_or("");
        let vals: Vec<f64> = if len == 0 {
            Vec::new()
        } else {
            body.split(' ').map(|v| v.parse::<f64>()).collect::<Result<_, _>>().map_err(|e| e.to_string())?
        };
        if vals.len() != len {
            return Err(format!("block {name}: expected {len} values, found {}", vals.len()));
        }
        blocks.push((name.to_string(), vals));
    }
    Ok(ParamText { fingerprint, header, blocks })
}
