//! Central finite-difference checking of tape gradients.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Worst discrepancy found by [`check_gradients`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_abs_err: f64,
    /// Largest `|analytic - numeric| / (abs_tol + rel_tol * max(|a|, |n|))`;
    /// the check passes when this is at most one.
    pub worst_ratio: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.worst_ratio <= 1.0
    }
}

/// Compare reverse-mode gradients against central differences with step `h`,
/// perturbing every element of every input.
///
/// `f` maps the inputs to an output tensor. With `weights` the checked
/// scalar is `sum(weights * output)`; the numeric side accumulates that
/// readout in f64 so that only the perturbed outputs contribute rounding
/// noise. Without `weights` the output must already be a scalar loss.
pub fn check_gradients<F>(
    inputs: &[Tensor],
    weights: Option<&Tensor>,
    h: f32,
    rel_tol: f64,
    abs_tol: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let analytic: Vec<Tensor> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let y = f(&mut tape, &vars)?;
        let loss = match weights {
            Some(w) => {
                let wv = tape.constant(w.clone());
                let p = tape.mul(y, wv)?;
                tape.sum(p)?
            }
            None => y,
        };
        let grads = tape.backward(loss)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| {
                grads
                    .wrt(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect()
    };

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let y = f(&mut tape, &vars)?;
        let out = tape.value(y);
        Ok(match weights {
            Some(w) => out
                .data()
                .iter()
                .zip(w.data())
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum(),
            None => out.item() as f64,
        })
    };

    let mut report = GradCheckReport {
        checked: 0,
        max_abs_err: 0.0,
        worst_ratio: 0.0,
    };
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            // Divide by the realised step, which differs from 2h in f32.
            let step = ((orig + h) as f64) - ((orig - h) as f64);
            let numeric = (plus - minus) / step;
            let a = analytic[i].data()[j] as f64;
            let err = (a - numeric).abs();
            let ratio = err / (abs_tol + rel_tol * a.abs().max(numeric.abs()));
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(err);
            report.worst_ratio = report.worst_ratio.max(ratio);
        }
    }
    Ok(report)
}

/// One randomized gradient check per differentiable operation plus two
/// composite networks, all drawn from `seed`. Returns `(case name, report)`.
pub fn operation_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    use rand::{Rng, SeedableRng};

    const H: f32 = 1e-3;
    const REL: f64 = 1e-2;
    const ABS: f64 = 1e-4;

    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let mut out = Vec::new();

    let weights_for = |shape: &[usize], rng: &mut rand::rngs::StdRng| {
        Tensor::randn(shape.to_vec(), rng).map(|v| 0.05 * v)
    };

    let n = rng.random_range(1..=2);
    let c = rng.random_range(1..=3);
    let hw = rng.random_range(3..=5);
    let o = rng.random_range(1..=3);
    let k = if rng.random_bool(0.5) { 3 } else { 1 };

    // conv2d, stride 1
    {
        let x = Tensor::randn([n, c, hw, hw], &mut rng);
        let w = Tensor::randn([o, c, k, k], &mut rng);
        let pad = k / 2;
        let r = weights_for(&[n, o, hw, hw], &mut rng);
        out.push((
            "conv2d_stride1",
            check_gradients(&[x, w], Some(&r), H, REL, ABS, |t, v| {
                t.conv2d(v[0], v[1], 1, pad)
            })?,
        ));
    }
    // conv2d, stride 2 with padding
    {
        let size = 2 * hw;
        let x = Tensor::randn([n, c, size, size], &mut rng);
        let w = Tensor::randn([o, c, 3, 3], &mut rng);
        let r = weights_for(&[n, o, hw, hw], &mut rng);
        out.push((
            "conv2d_stride2",
            check_gradients(&[x, w], Some(&r), H, REL, ABS, |t, v| {
                t.conv2d(v[0], v[1], 2, 1)
            })?,
        ));
    }
    {
        let x = Tensor::randn([n, c, hw, hw], &mut rng);
        let r = weights_for(&[n, c, 2 * hw, 2 * hw], &mut rng);
        out.push((
            "upsample2x",
            check_gradients(&[x], Some(&r), H, REL, ABS, |t, v| t.upsample2x(v[0]))?,
        ));
    }
    {
        let a = Tensor::randn([n, c, hw, hw], &mut rng);
        let b = Tensor::randn([n, o, hw, hw], &mut rng);
        let r = weights_for(&[n, c + o, hw, hw], &mut rng);
        out.push((
            "concat_channels",
            check_gradients(&[a, b], Some(&r), H, REL, ABS, |t, v| {
                t.concat_channels(v[0], v[1])
            })?,
        ));
    }
    {
        let f = rng.random_range(2..=5);
        let g = rng.random_range(2..=5);
        let x = Tensor::randn([n + 1, f], &mut rng);
        let w = Tensor::randn([f, g], &mut rng);
        let b = Tensor::randn([g], &mut rng);
        let r = weights_for(&[n + 1, g], &mut rng);
        out.push((
            "linear",
            check_gradients(&[x, w, b], Some(&r), H, REL, ABS, |t, v| {
                t.linear(v[0], v[1], v[2])
            })?,
        ));
    }
    {
        let groups = rng.random_range(1..=2);
        let ch = groups * rng.random_range(1..=2);
        let x = Tensor::randn([n, ch, hw, hw], &mut rng);
        let gamma = Tensor::randn([ch], &mut rng);
        let beta = Tensor::randn([ch], &mut rng);
        let r = weights_for(&[n, ch, hw, hw], &mut rng);
        out.push((
            "group_norm",
            check_gradients(&[x, gamma, beta], Some(&r), H, REL, ABS, |t, v| {
                t.group_norm(v[0], groups, v[1], v[2], 1e-5)
            })?,
        ));
    }
    let shape = [n, c, hw, hw];
    {
        let x = Tensor::randn(shape, &mut rng).map(|v| 2.0 * v);
        let r = weights_for(&shape, &mut rng);
        out.push((
            "silu",
            check_gradients(&[x], Some(&r), H, REL, ABS, |t, v| t.silu(v[0]))?,
        ));
    }
    type Binary = fn(&mut Tape<'_>, Var, Var) -> Result<Var>;
    let binaries: [(&'static str, Binary); 3] = [
        ("add", |t, a, b| t.add(a, b)),
        ("sub", |t, a, b| t.sub(a, b)),
        ("mul", |t, a, b| t.mul(a, b)),
    ];
    for (name, op) in binaries {
        let a = Tensor::randn(shape, &mut rng);
        let b = Tensor::randn(shape, &mut rng);
        let r = weights_for(&shape, &mut rng);
        out.push((
            name,
            check_gradients(&[a, b], Some(&r), H, REL, ABS, |t, v| op(t, v[0], v[1]))?,
        ));
    }
    {
        let factor = rng.random_range(-2.0..2.0);
        let x = Tensor::randn(shape, &mut rng);
        let r = weights_for(&shape, &mut rng);
        out.push((
            "scale",
            check_gradients(&[x], Some(&r), H, REL, ABS, |t, v| t.scale(v[0], factor))?,
        ));
    }
    {
        let x = Tensor::randn(shape, &mut rng);
        let b = Tensor::randn([c], &mut rng);
        let r = weights_for(&shape, &mut rng);
        out.push((
            "channel_bias",
            check_gradients(&[x, b], Some(&r), H, REL, ABS, |t, v| {
                t.channel_bias(v[0], v[1])
            })?,
        ));
    }
    {
        let x = Tensor::randn(shape, &mut rng);
        let s = Tensor::randn([n, c], &mut rng);
        let b = Tensor::randn([n, c], &mut rng);
        let r = weights_for(&shape, &mut rng);
        out.push((
            "scale_shift",
            check_gradients(&[x.clone(), s, b.clone()], Some(&r), H, REL, ABS, |t, v| {
                t.scale_shift(v[0], Some(v[1]), v[2])
            })?,
        ));
        out.push((
            "shift_only",
            check_gradients(&[x, b], Some(&r), H, REL, ABS, |t, v| {
                t.scale_shift(v[0], None, v[1])
            })?,
        ));
    }
    {
        let x = Tensor::randn(shape, &mut rng);
        let r = weights_for(&[n, c], &mut rng);
        out.push((
            "avg_pool",
            check_gradients(&[x], Some(&r), H, REL, ABS, |t, v| t.avg_pool(v[0]))?,
        ));
    }
    {
        let x = Tensor::randn([n, c, 2 * hw, 2 * hw], &mut rng);
        let r = weights_for(&[n, c * hw * hw], &mut rng);
        out.push((
            "avg_pool2x_flatten",
            check_gradients(&[x], Some(&r), H, REL, ABS, |t, v| {
                let p = t.avg_pool2x(v[0])?;
                t.flatten(p)
            })?,
        ));
    }
    {
        let x = Tensor::randn(shape, &mut rng).map(|v| 0.1 * v);
        out.push((
            "sum",
            check_gradients(std::slice::from_ref(&x), None, H, REL, ABS, |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq)
            })?,
        ));
        out.push((
            "mean",
            check_gradients(&[x], None, H, REL, ABS, |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.mean(sq)
            })?,
        ));
    }
    {
        let a = Tensor::randn(shape, &mut rng).map(|v| 0.3 * v);
        let b = Tensor::randn(shape, &mut rng).map(|v| 0.3 * v);
        out.push((
            "mse",
            check_gradients(&[a, b], None, H, REL, ABS, |t, v| t.mse(v[0], v[1]))?,
        ));
    }
    // Two-layer perceptron with SiLU and an MSE head.
    {
        let (f, hdim, g) = (3, 4, 2);
        let x = Tensor::randn([3, f], &mut rng).map(|v| 0.5 * v);
        let target = Tensor::randn([3, g], &mut rng).map(|v| 0.3 * v);
        let w1 = Tensor::randn([f, hdim], &mut rng).map(|v| 0.5 * v);
        let b1 = Tensor::randn([hdim], &mut rng).map(|v| 0.5 * v);
        let w2 = Tensor::randn([hdim, g], &mut rng).map(|v| 0.5 * v);
        let b2 = Tensor::randn([g], &mut rng).map(|v| 0.3 * v);
        out.push((
            "mlp_silu",
            check_gradients(&[w1, b1, w2, b2], None, H, REL, ABS, |t, v| {
                let xi = t.constant(x.clone());
                let h = t.linear(xi, v[0], v[1])?;
                let h = t.silu(h)?;
                let y = t.linear(h, v[2], v[3])?;
                let tg = t.constant(target.clone());
                t.mse(y, tg)
            })?,
        ));
    }
    // Conditioned convolutional block: conv -> group norm -> modulation -> silu -> conv.
    {
        let ch = 2;
        let x = Tensor::randn([1, 1, 4, 4], &mut rng);
        let w1 = Tensor::randn([ch, 1, 3, 3], &mut rng);
        let gamma = Tensor::randn([ch], &mut rng);
        let beta = Tensor::randn([ch], &mut rng);
        let cond = Tensor::randn([1, ch], &mut rng).map(|v| 0.3 * v);
        let w2 = Tensor::randn([1, ch, 3, 3], &mut rng);
        let r = weights_for(&[1, 1, 4, 4], &mut rng).map(|v| 0.4 * v);
        out.push((
            "conv_block",
            check_gradients(
                &[x, w1, gamma, beta, cond, w2],
                Some(&r),
                H,
                REL,
                ABS,
                |t, v| {
                    let h = t.conv2d(v[0], v[1], 1, 1)?;
                    let h = t.group_norm(h, 1, v[2], v[3], 1e-5)?;
                    let h = t.scale_shift(h, Some(v[4]), v[4])?;
                    let h = t.silu(h)?;
                    t.conv2d(h, v[5], 1, 1)
                },
            )?,
        ));
    }
    Ok(out)
}
