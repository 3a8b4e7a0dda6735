//! Central-difference oracle and comparison against reverse-mode gradients.

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for the relative error so exact zeros compare cleanly.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps` for every element of `x`.
pub fn finite_diff_grad(
    mut f: impl FnMut(&Tensor<f64>) -> Result<f64>,
    x: &Tensor<f64>,
    eps: f64,
) -> Result<Tensor<f64>> {
    assert!(eps > 0.0, "eps must be positive");
    let indices: Vec<usize> = (0..x.numel()).collect();
    let vals = finite_diff_at(&mut f, x, eps, &indices)?;
    Tensor::new(x.shape().to_vec(), vals)
}

fn finite_diff_at(
    f: &mut impl FnMut(&Tensor<f64>) -> Result<f64>,
    x: &Tensor<f64>,
    eps: f64,
    indices: &[usize],
) -> Result<Vec<f64>> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        let d = (plus - minus) / (2.0 * eps);
        if !d.is_finite() {
            return Err(Error::OracleNonFinite { index: i });
        }
        out.push(d);
    }
    Ok(out)
}

/// Evenly spread, deterministic sample of at most `max` flat indices.
pub fn sample_indices(numel: usize, max: usize) -> Vec<usize> {
    if numel <= max {
        return (0..numel).collect();
    }
    let mut idx: Vec<usize> = (0..max)
        .map(|i| i * numel / max + (i * 7919) % (numel / max).max(1))
        .collect();
    idx.dedup();
    idx
}

#[derive(Clone, Debug)]
pub struct CheckEntry {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

/// Options shared by the checks below.
#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub eps: f64,
    /// Elements probed per tensor.
    pub per_tensor: usize,
    /// Op whose backward is deliberately corrupted in the analytic pass.
    pub corrupt_op: Option<String>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            per_tensor: 6,
            corrupt_op: None,
        }
    }
}

/// Compare gradients w.r.t. graph inputs built from `inputs`.
pub fn check_inputs(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
    opts: &CheckOptions,
) -> Result<Vec<CheckEntry>> {
    let mut g = Graph::<f64>::new();
    if let Some(op) = &opts.corrupt_op {
        g.corrupt_gradient_of(op.clone());
    }
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let mut report = Vec::new();
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[k])
            .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
        let idx = sample_indices(x.numel(), opts.per_tensor);
        let mut f = |probe: &Tensor<f64>| -> Result<f64> {
            let mut g = Graph::<f64>::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, t)| g.constant(if j == k { probe.clone() } else { t.clone() }))
                .collect();
            let loss = build(&mut g, &vars)?;
            Ok(g.value(loss).item())
        };
        let numeric = finite_diff_at(&mut f, x, opts.eps, &idx)?;
        report.push(entry(format!("input{k}"), &idx, analytic.data(), &numeric));
    }
    Ok(report)
}

/// Compare gradients w.r.t. the parameters `ids` of `store`.
pub fn check_params(
    store: &ParamStore,
    ids: &[ParamId],
    build: impl Fn(&mut Graph<'_, f64>) -> Result<Var>,
    opts: &CheckOptions,
) -> Result<Vec<CheckEntry>> {
    let mut g = Graph::<f64>::with_params(store);
    if let Some(op) = &opts.corrupt_op {
        g.corrupt_gradient_of(op.clone());
    }
    let loss = build(&mut g)?;
    let grads = g.backward(loss)?;
    let analytic: std::collections::HashMap<ParamId, Tensor<f64>> = grads.params().collect();
    let mut report = Vec::new();
    for &id in ids {
        let base = store.value(id).cast::<f64>();
        let a = analytic
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(base.shape().to_vec()));
        let idx = sample_indices(base.numel(), opts.per_tensor);
        let mut f = |probe: &Tensor<f64>| -> Result<f64> {
            let mut g = Graph::<f64>::with_params(store);
            g.override_param(id, probe.clone());
            let loss = build(&mut g)?;
            Ok(g.value(loss).item())
        };
        let numeric = finite_diff_at(&mut f, &base, opts.eps, &idx)?;
        report.push(entry(store.get(id).name.clone(), &idx, a.data(), &numeric));
    }
    Ok(report)
}

fn entry(name: String, idx: &[usize], analytic: &[f64], numeric: &[f64]) -> CheckEntry {
    let max_rel_error = idx
        .iter()
        .zip(numeric)
        .map(|(&i, &n)| rel_error(analytic[i], n))
        .fold(0.0, f64::max);
    CheckEntry {
        name,
        checked: idx.len(),
        max_rel_error,
    }
}

/// Contract `y` with a fixed pseudo-random weight tensor to a scalar so every
/// output element influences the loss differently.
pub fn probe_loss(g: &mut Graph<'_, f64>, y: Var) -> Result<Var> {
    let w = Tensor::from_fn(g.shape(y).to_vec(), |i| {
        ((i as f64 + 1.0) * 0.618_033_988_75).fract() - 0.4
    });
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

type PrimitiveCase = (
    &'static str,
    Vec<Vec<usize>>,
    fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
);

fn primitive_cases() -> Vec<PrimitiveCase> {
    vec![
        ("add", vec![vec![2, 3], vec![1, 3]], |g, v| {
            g.add(v[0], v[1])
        }),
        ("sub", vec![vec![2, 3], vec![2, 1]], |g, v| {
            g.sub(v[0], v[1])
        }),
        ("mul", vec![vec![2, 3], vec![2, 3]], |g, v| {
            g.mul(v[0], v[1])
        }),
        ("div", vec![vec![5], vec![5]], |g, v| {
            let a = g.abs(v[1]);
            let d = g.offset(a, 1.0);
            g.div(v[0], d)
        }),
        ("minimum", vec![vec![5], vec![5]], |g, v| {
            g.minimum(v[0], v[1])
        }),
        ("maximum", vec![vec![5], vec![5]], |g, v| {
            g.maximum(v[0], v[1])
        }),
        ("scale", vec![vec![5]], |g, v| Ok(g.scale(v[0], -1.7))),
        ("sigmoid", vec![vec![5]], |g, v| Ok(g.sigmoid(v[0]))),
        ("softplus", vec![vec![5]], |g, v| Ok(g.softplus(v[0]))),
        ("gelu", vec![vec![5]], |g, v| Ok(g.gelu(v[0]))),
        ("exp", vec![vec![5]], |g, v| Ok(g.exp(v[0]))),
        ("log", vec![vec![5]], |g, v| {
            let e = g.exp(v[0]);
            let p = g.offset(e, 0.5);
            Ok(g.log(p))
        }),
        ("abs", vec![vec![5]], |g, v| Ok(g.abs(v[0]))),
        ("clamp", vec![vec![5]], |g, v| Ok(g.clamp(v[0], -0.5, 0.5))),
        ("softmax", vec![vec![2, 5]], |g, v| g.softmax(v[0])),
        ("matmul", vec![vec![2, 3], vec![3, 4]], |g, v| {
            g.matmul(v[0], v[1])
        }),
        (
            "matmul_batched",
            vec![vec![2, 2, 3], vec![2, 3, 2]],
            |g, v| g.matmul(v[0], v[1]),
        ),
        ("matmul_shared", vec![vec![2, 2, 3], vec![3, 2]], |g, v| {
            g.matmul(v[0], v[1])
        }),
        (
            "attention",
            vec![vec![2, 3, 4], vec![2, 2, 4], vec![2, 2, 4]],
            |g, v| super::attention(g, v[0], v[1], v[2]),
        ),
        ("permute", vec![vec![2, 3, 4]], |g, v| {
            g.permute(v[0], &[1, 2, 0])
        }),
        ("reshape", vec![vec![2, 3]], |g, v| {
            g.reshape(v[0], vec![3, 2])
        }),
        ("broadcast", vec![vec![2, 1]], |g, v| {
            g.broadcast_to(v[0], vec![2, 3])
        }),
        ("sum_axis", vec![vec![2, 3, 2]], |g, v| g.sum_axis(v[0], 1)),
        ("mean", vec![vec![5]], |g, v| Ok(g.mean(v[0]))),
        ("layer_norm", vec![vec![3, 5], vec![5], vec![5]], |g, v| {
            g.layer_norm(v[0], v[1], v[2], 1e-5)
        }),
        (
            "group_norm_1",
            vec![vec![4, 2, 3], vec![4], vec![4]],
            |g, v| g.group_norm(v[0], 1, v[1], v[2], 1e-5),
        ),
        (
            "group_norm_4",
            vec![vec![8, 3], vec![8], vec![8]],
            |g, v| g.group_norm(v[0], 4, v[1], v[2], 1e-5),
        ),
        ("avg_pool2d", vec![vec![2, 4, 4]], |g, v| {
            g.avg_pool2d(v[0], 2)
        }),
        ("global_pool", vec![vec![2, 3, 3]], |g, v| {
            let a = g.mean_axis(v[0], 2)?;
            g.mean_axis(a, 1)
        }),
        ("directional_pool", vec![vec![2, 3, 4]], |g, v| {
            g.mean_axis(v[0], 1)
        }),
        (
            "conv2d",
            vec![vec![2, 5, 5], vec![3, 2, 3, 3], vec![3]],
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1),
        ),
        ("depthwise_conv1d", vec![vec![3, 5], vec![3, 3]], |g, v| {
            g.depthwise_conv1d(v[0], v[1], 1)
        }),
        ("pointwise_conv", vec![vec![3, 4], vec![2, 3]], |g, v| {
            g.matmul(v[1], v[0])
        }),
        ("concat", vec![vec![2, 3], vec![2, 1]], |g, v| {
            g.concat(&[v[0], v[1]], 1)
        }),
        ("slice", vec![vec![3, 4]], |g, v| g.slice(v[0], 1, 1, 2)),
        (
            "selective_scan",
            vec![
                vec![6, 3],
                vec![6, 3],
                vec![3, 2],
                vec![6, 2],
                vec![6, 2],
                vec![3],
            ],
            |g, v| {
                // positive step sizes and negative rates as in the model
                let delta = g.softplus(v[1]);
                let ea = g.exp(v[2]);
                let a = g.neg(ea);
                g.selective_scan(v[0], delta, a, v[3], v[4], v[5])
            },
        ),
    ]
}

/// Check every engine primitive on seeded standard-normal inputs.
pub fn primitive_suite(opts: &CheckOptions, seed: u64) -> Result<Vec<CheckEntry>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, shapes, f) in primitive_cases() {
        let inputs: Vec<Tensor<f64>> = shapes
            .iter()
            .map(|s| Tensor::randn(s.clone(), 1.0, &mut rng))
            .collect();
        let entries = check_inputs(
            &inputs,
            |g, v| {
                let y = f(g, v)?;
                probe_loss(g, y)
            },
            opts,
        )?;
        let max_rel_error = entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max);
        out.push(CheckEntry {
            name: name.to_string(),
            checked: entries.iter().map(|e| e.checked).sum(),
            max_rel_error,
        });
    }
    Ok(out)
}
