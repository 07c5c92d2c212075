use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use super::{increment, Result, Tensor, TensorError};

/// Largest number of distinct index labels a single contraction may use.
pub const MAX_INDICES: usize = 6;

/// Minimum multiply-accumulate count before a batched product is split across threads.
const PAR_THRESHOLD: usize = 1 << 15;

/// Einstein-summation description such as `"xyd,dnk->xynk"`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContractionSpec {
    inputs: Vec<Vec<char>>,
    output: Vec<char>,
}

impl ContractionSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let text: String = text.chars().filter(|c| !c.is_whitespace()).collect();
        let (lhs, rhs) = text
            .split_once("->")
            .ok_or_else(|| TensorError::Argument(format!("`{text}` has no `->`")))?;
        let inputs: Vec<Vec<char>> = lhs.split(',').map(|s| s.chars().collect()).collect();
        let output: Vec<char> = rhs.chars().collect();
        for label in inputs.iter().flatten().chain(&output) {
            if !label.is_ascii_alphabetic() {
                return Err(TensorError::Argument(format!(
                    "invalid index label `{label}`"
                )));
            }
        }
        for (i, c) in output.iter().enumerate() {
            if output[..i].contains(c) {
                return Err(TensorError::Argument(format!(
                    "output label `{c}` repeated"
                )));
            }
            if !inputs.iter().any(|op| op.contains(c)) {
                return Err(TensorError::Argument(format!(
                    "output label `{c}` missing from inputs"
                )));
            }
        }
        let spec = Self { inputs, output };
        let distinct = spec.labels().len();
        if distinct > MAX_INDICES {
            return Err(TensorError::Unsupported(format!(
                "{distinct} distinct indices, at most {MAX_INDICES} supported"
            )));
        }
        Ok(spec)
    }

    pub fn inputs(&self) -> &[Vec<char>] {
        &self.inputs
    }

    pub fn output(&self) -> &[char] {
        &self.output
    }

    /// Distinct labels in order of first appearance.
    pub fn labels(&self) -> Vec<char> {
        let mut seen = Vec::new();
        for &c in self.inputs.iter().flatten() {
            if !seen.contains(&c) {
                seen.push(c);
            }
        }
        seen
    }

    /// Extent of every label, validated against the operand shapes.
    fn extents(&self, operands: &[&Tensor]) -> Result<Vec<(char, usize)>> {
        if operands.len() != self.inputs.len() {
            return Err(TensorError::Argument(format!(
                "spec has {} operands, got {}",
                self.inputs.len(),
                operands.len()
            )));
        }
        let mut extents: Vec<(char, usize)> = Vec::new();
        for (k, (labels, t)) in self.inputs.iter().zip(operands).enumerate() {
            if labels.len() != t.rank() {
                return Err(TensorError::Shape(format!(
                    "operand {k} has rank {} but {} labels",
                    t.rank(),
                    labels.len()
                )));
            }
            for (&c, &e) in labels.iter().zip(t.shape()) {
                match extents.iter().find(|(l, _)| *l == c) {
                    Some(&(_, prev)) if prev != e => {
                        return Err(TensorError::Shape(format!(
                            "label `{c}` has extent {prev} and {e}"
                        )))
                    }
                    Some(_) => {}
                    None => extents.push((c, e)),
                }
            }
        }
        Ok(extents)
    }
}

impl FromStr for ContractionSpec {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

impl fmt::Display for ContractionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inputs: Vec<String> = self.inputs.iter().map(|l| l.iter().collect()).collect();
        let output: String = self.output.iter().collect();
        write!(f, "{}->{}", inputs.join(","), output)
    }
}

/// Evaluates an Einstein summation.
///
/// Operands without repeated labels are folded pairwise from the left through a
/// batched matrix product; anything else goes through a direct index loop. Each
/// output element accumulates its terms in ascending contracted-index order, so
/// results do not depend on the thread count.
pub fn contract(spec: &str, operands: &[&Tensor]) -> Result<Tensor> {
    let spec = ContractionSpec::parse(spec)?;
    contract_spec(&spec, operands)
}

pub(crate) fn contract_spec(spec: &ContractionSpec, operands: &[&Tensor]) -> Result<Tensor> {
    let extents = spec.extents(operands)?;
    let has_repeat = spec
        .inputs
        .iter()
        .any(|l| l.iter().enumerate().any(|(i, c)| l[..i].contains(c)));
    if has_repeat || operands.len() == 1 {
        return direct_loop(spec, operands, &extents);
    }

    let mut acc_labels = spec.inputs[0].clone();
    let mut acc = reduce_private(operands[0], &acc_labels, &keep_after(spec, 0))?;
    acc_labels.retain(|c| keep_after(spec, 0).contains(c));
    for k in 1..operands.len() {
        let keep = keep_after(spec, k);
        let mut rhs_keep = keep.clone();
        rhs_keep.extend(acc_labels.iter().copied());
        let rhs_labels: Vec<char> = spec.inputs[k]
            .iter()
            .copied()
            .filter(|c| rhs_keep.contains(c))
            .collect();
        let rhs = reduce_private(operands[k], &spec.inputs[k], &rhs_keep)?;
        let (out, labels) = pairwise(&acc, &acc_labels, &rhs, &rhs_labels, &keep)?;
        acc = out;
        acc_labels = labels;
    }
    let perm: Vec<usize> = spec
        .output
        .iter()
        .map(|c| {
            acc_labels
                .iter()
                .position(|l| l == c)
                .expect("output label survives folding")
        })
        .collect();
    if spec.output.is_empty() {
        return Ok(Tensor::scalar(acc.data()[0]));
    }
    acc.permute(&perm)
}

/// Labels still needed after folding operand `k`: the output plus every later operand.
fn keep_after(spec: &ContractionSpec, k: usize) -> Vec<char> {
    let mut keep = spec.output.clone();
    for labels in &spec.inputs[k + 1..] {
        keep.extend(labels.iter().copied());
    }
    keep
}

/// Sums out axes whose labels are not in `keep`.
fn reduce_private(t: &Tensor, labels: &[char], keep: &[char]) -> Result<Tensor> {
    if labels.iter().all(|c| keep.contains(c)) {
        return Ok(t.clone());
    }
    let kept: Vec<usize> = (0..labels.len())
        .filter(|&i| keep.contains(&labels[i]))
        .collect();
    let dropped: Vec<usize> = (0..labels.len())
        .filter(|&i| !keep.contains(&labels[i]))
        .collect();
    let mut perm = kept.clone();
    perm.extend(&dropped);
    let moved = t.permute(&perm)?;
    let inner: usize = dropped.iter().map(|&i| t.shape()[i]).product();
    let shape: Vec<usize> = kept.iter().map(|&i| t.shape()[i]).collect();
    let data: Vec<f64> = moved
        .data()
        .chunks(inner)
        .map(|chunk| chunk.iter().fold(0.0, |s, v| s + v))
        .collect();
    if shape.is_empty() {
        return Ok(Tensor::scalar(data[0]));
    }
    Tensor::new(shape, data)
}

fn pairwise(
    a: &Tensor,
    la: &[char],
    b: &Tensor,
    lb: &[char],
    keep: &[char],
) -> Result<(Tensor, Vec<char>)> {
    let batch: Vec<char> = la
        .iter()
        .copied()
        .filter(|c| lb.contains(c) && keep.contains(c))
        .collect();
    let summed: Vec<char> = la
        .iter()
        .copied()
        .filter(|c| lb.contains(c) && !keep.contains(c))
        .collect();
    let free_a: Vec<char> = la.iter().copied().filter(|c| !lb.contains(c)).collect();
    let free_b: Vec<char> = lb.iter().copied().filter(|c| !la.contains(c)).collect();

    let pos = |labels: &[char], c: char| labels.iter().position(|&l| l == c).unwrap();
    let ext = |t: &Tensor, labels: &[char], set: &[char]| -> usize {
        set.iter().map(|&c| t.shape()[pos(labels, c)]).product()
    };

    let perm_a: Vec<usize> = batch
        .iter()
        .chain(&free_a)
        .chain(&summed)
        .map(|&c| pos(la, c))
        .collect();
    let perm_b: Vec<usize> = batch
        .iter()
        .chain(&summed)
        .chain(&free_b)
        .map(|&c| pos(lb, c))
        .collect();
    let pa = if a.rank() == 0 {
        a.clone()
    } else {
        a.permute(&perm_a)?
    };
    let pb = if b.rank() == 0 {
        b.clone()
    } else {
        b.permute(&perm_b)?
    };

    let nb = ext(a, la, &batch);
    let m = ext(a, la, &free_a);
    let k = ext(a, la, &summed);
    let n = ext(b, lb, &free_b);
    let data = batched_matmul(pa.data(), pb.data(), nb, m, k, n);

    let mut labels = batch.clone();
    labels.extend(&free_a);
    labels.extend(&free_b);
    let mut shape: Vec<usize> = batch
        .iter()
        .chain(&free_a)
        .map(|&c| a.shape()[pos(la, c)])
        .collect();
    shape.extend(free_b.iter().map(|&c| b.shape()[pos(lb, c)]));
    let out = if shape.is_empty() {
        Tensor::scalar(data[0])
    } else {
        Tensor::new(shape, data)?
    };
    Ok((out, labels))
}

/// `c[p, i, j] = sum_q a[p, i, q] * b[p, q, j]`, accumulated in ascending `q`.
pub(crate) fn batched_matmul(
    a: &[f64],
    b: &[f64],
    nb: usize,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<f64> {
    let mut c = vec![0.0; nb * m * n];
    if n == 0 {
        return c;
    }
    let row = |r: usize, out: &mut [f64]| {
        let p = r / m;
        let a_row = &a[r * k..(r + 1) * k];
        let b_blk = &b[p * k * n..(p + 1) * k * n];
        for (q, &aq) in a_row.iter().enumerate() {
            let b_row = &b_blk[q * n..(q + 1) * n];
            for (o, &bv) in out.iter_mut().zip(b_row) {
                *o += aq * bv;
            }
        }
    };
    if nb * m * k * n >= PAR_THRESHOLD && nb * m > 1 {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(r, out)| row(r, out));
    } else {
        c.chunks_mut(n).enumerate().for_each(|(r, out)| row(r, out));
    }
    c
}

fn direct_loop(
    spec: &ContractionSpec,
    operands: &[&Tensor],
    extents: &[(char, usize)],
) -> Result<Tensor> {
    let out_labels = &spec.output;
    let summed: Vec<char> = extents
        .iter()
        .map(|&(c, _)| c)
        .filter(|c| !out_labels.contains(c))
        .collect();
    let extent = |c: char| extents.iter().find(|(l, _)| *l == c).unwrap().1;
    let out_shape: Vec<usize> = out_labels.iter().map(|&c| extent(c)).collect();
    let sum_shape: Vec<usize> = summed.iter().map(|&c| extent(c)).collect();
    let out_numel: usize = out_shape.iter().product();
    let sum_numel: usize = sum_shape.iter().product();

    // for each operand axis: (from output index?, position)
    let lookup: Vec<Vec<(bool, usize)>> = spec
        .inputs
        .iter()
        .map(|labels| {
            labels
                .iter()
                .map(|c| match out_labels.iter().position(|l| l == c) {
                    Some(p) => (true, p),
                    None => (false, summed.iter().position(|l| l == c).unwrap()),
                })
                .collect()
        })
        .collect();
    let strides: Vec<Vec<usize>> = operands.iter().map(|t| t.strides()).collect();

    let mut data = vec![0.0; out_numel];
    let mut oi = vec![0usize; out_shape.len()];
    for slot in data.iter_mut() {
        let mut si = vec![0usize; sum_shape.len()];
        let mut acc = 0.0;
        for _ in 0..sum_numel {
            let mut term = 1.0;
            for ((t, map), st) in operands.iter().zip(&lookup).zip(&strides) {
                let off: usize = map
                    .iter()
                    .zip(st)
                    .map(|(&(is_out, p), &s)| s * if is_out { oi[p] } else { si[p] })
                    .sum();
                term *= t.data()[off];
            }
            acc += term;
            increment(&mut si, &sum_shape);
        }
        *slot = acc;
        increment(&mut oi, &out_shape);
    }
    if out_shape.is_empty() {
        return Ok(Tensor::scalar(data[0]));
    }
    Tensor::new(out_shape, data)
}
