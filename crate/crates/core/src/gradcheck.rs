//! Reverse-mode vs. central finite-difference checks in f64.
//!
//! Every check reduces an op to the scalar `⟨cot, op(inputs)⟩` with a random
//! cotangent and compares the taped gradient against central differences
//! entry by entry.  Relative error per entry is
//! `|a − f| / max(|a|, |f|, REL_FLOOR)`.

use crate::autodiff::{Graph, Var};
use crate::diffusion::{Conditioning, ParamMap, Trainable};
use crate::error::Result;
use crate::rng::{normal_vec, rng_for, Rng};
use crate::tensor::kernels::AttnMask;
use crate::tensor::Tensor;
use crate::unet::{UNet, UNetConfig};
use rand::Rng as _;

pub const DEFAULT_STEP: f64 = 1e-4;
pub const REL_FLOOR: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: String,
    pub max_rel_err: f64,
    pub entries: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

pub fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(REL_FLOOR)
}

type OpFn<'a> = dyn Fn(&Graph<f64>, &[Var]) -> Result<Var> + 'a;

/// Compare the taped gradient of `⟨cot, f(inputs)⟩` with central differences.
pub fn check_fn(name: &str, inputs: &[Tensor], f: &OpFn<'_>, h: f64, rng: &mut Rng) -> Result<GradReport> {
    let g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&g, &vars)?;
    let dims = g.dims(out);
    let n: usize = dims.iter().product();
    let cot = Tensor::new(dims, normal_vec(rng, n))?;
    let grads = g.backward(out, &cot)?;
    let scalar = |xs: &[Tensor]| -> Result<f64> {
        let g = Graph::<f64>::inference();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vars)?;
        Ok(g.value(out).dot(&cot))
    };
    let mut worst = 0.0f64;
    let mut entries = 0;
    for (i, v) in vars.iter().enumerate() {
        let an = grads.get(*v);
        for j in 0..inputs[i].len() {
            let mut xs = inputs.to_vec();
            let mut bump = |d: f64| -> Result<f64> {
                let mut data = inputs[i].to_vec();
                data[j] += d;
                xs[i] = Tensor::new(inputs[i].dims().to_vec(), data)?;
                scalar(&xs)
            };
            let fd = (bump(h)? - bump(-h)?) / (2.0 * h);
            worst = worst.max(rel_err(an.data()[j], fd));
            entries += 1;
        }
    }
    Ok(GradReport {
        name: name.to_string(),
        max_rel_err: worst,
        entries,
    })
}

fn randn(rng: &mut Rng, dims: &[usize]) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), normal_vec(rng, n)).expect("dims match")
}

fn positive(rng: &mut Rng, dims: &[usize]) -> Tensor {
    randn(rng, dims).map(|v| 0.5 + v.abs())
}

/// Away from zero, for divisors.
fn nonzero(rng: &mut Rng, dims: &[usize]) -> Tensor {
    let n = dims.iter().product();
    let data = (0..n)
        .map(|_| {
            let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
            s * rng.random_range(0.5..2.0)
        })
        .collect();
    Tensor::new(dims.to_vec(), data).expect("dims match")
}

/// Every differentiable op on small random inputs.
pub fn op_suite(seed: u64, h: f64) -> Result<Vec<GradReport>> {
    let mut rng = rng_for(seed, "gradcheck-ops", 0);
    let r = &mut rng;
    let mut out = Vec::new();
    let mut run = |name: &str, inputs: Vec<Tensor>, f: &OpFn<'_>, rng: &mut Rng| -> Result<()> {
        out.push(check_fn(name, &inputs, f, h, rng)?);
        Ok(())
    };
    let a = randn(r, &[2, 3]);
    let b = randn(r, &[2, 3]);
    let row = randn(r, &[3]);
    run("add", vec![a.clone(), b.clone()], &|g, v| g.add(v[0], v[1]), r)?;
    run("add_broadcast", vec![a.clone(), row.clone()], &|g, v| g.add(v[0], v[1]), r)?;
    run("sub", vec![a.clone(), row.clone()], &|g, v| g.sub(v[0], v[1]), r)?;
    run("mul", vec![a.clone(), b.clone()], &|g, v| g.mul(v[0], v[1]), r)?;
    run("mul_broadcast", vec![a.clone(), row.clone()], &|g, v| g.mul(v[0], v[1]), r)?;
    let d = nonzero(r, &[2, 3]);
    run("div", vec![a.clone(), d], &|g, v| g.div(v[0], v[1]), r)?;
    let d = nonzero(r, &[3]);
    run("div_broadcast", vec![a.clone(), d], &|g, v| g.div(v[0], v[1]), r)?;
    run("add_scalar", vec![a.clone()], &|g, v| Ok(g.add_scalar(v[0], 0.7)), r)?;
    run("mul_scalar", vec![a.clone()], &|g, v| Ok(g.mul_scalar(v[0], -1.3)), r)?;
    run("exp", vec![a.clone()], &|g, v| Ok(g.exp(v[0])), r)?;
    run("log", vec![positive(r, &[2, 3])], &|g, v| g.log(v[0]), r)?;
    run("sqrt", vec![positive(r, &[2, 3])], &|g, v| g.sqrt(v[0]), r)?;
    run("sigmoid", vec![a.clone()], &|g, v| Ok(g.sigmoid(v[0])), r)?;
    run("silu", vec![a.clone()], &|g, v| Ok(g.silu(v[0])), r)?;
    run("tanh", vec![a.clone()], &|g, v| Ok(g.tanh(v[0])), r)?;
    run("sum", vec![a.clone()], &|g, v| Ok(g.sum(v[0])), r)?;
    run("mean", vec![a.clone()], &|g, v| Ok(g.mean(v[0])), r)?;
    run("reshape", vec![a.clone()], &|g, v| g.reshape(v[0], &[3, 2]), r)?;
    run("swap_leading", vec![randn(r, &[2, 3, 2])], &|g, v| g.swap_leading(v[0]), r)?;
    run(
        "concat",
        vec![randn(r, &[2, 2, 1]), randn(r, &[2, 2, 3])],
        &|g, v| g.concat(&[v[0], v[1]]),
        r,
    )?;
    run(
        "matmul",
        vec![randn(r, &[3, 4]), randn(r, &[4, 2])],
        &|g, v| g.matmul(v[0], v[1]),
        r,
    )?;
    for stride in [1, 2] {
        run(
            &format!("conv_spatial_s{stride}"),
            vec![randn(r, &[2, 4, 4, 2]), randn(r, &[3, 3, 2, 3]), randn(r, &[3])],
            &move |g, v| g.conv_spatial(v[0], v[1], v[2], stride),
            r,
        )?;
    }
    run("upsample2", vec![randn(r, &[2, 2, 3, 2])], &|g, v| g.upsample2(v[0]), r)?;
    run(
        "group_norm",
        vec![randn(r, &[2, 3, 3, 4]), randn(r, &[4]), randn(r, &[4])],
        &|g, v| g.group_norm(v[0], 2, v[1], v[2]),
        r,
    )?;
    let qkv = || [[2usize, 3, 4]; 3];
    let [dq, dk, dv] = qkv();
    run(
        "attention",
        vec![randn(r, &dq), randn(r, &dk), randn(r, &dv)],
        &|g, v| g.attention(v[0], v[1], v[2], 2, None, AttnMask::None),
        r,
    )?;
    run(
        "attention_bias",
        vec![randn(r, &dq), randn(r, &dk), randn(r, &dv), randn(r, &[2, 3, 3])],
        &|g, v| g.attention(v[0], v[1], v[2], 2, Some(v[3]), AttnMask::None),
        r,
    )?;
    run(
        "attention_masked",
        vec![randn(r, &dq), randn(r, &dk), randn(r, &dv), randn(r, &[2, 3, 3])],
        &|g, v| {
            let m = AttnMask::Independent(vec![false, true, false]);
            g.attention(v[0], v[1], v[2], 2, Some(v[3]), m)
        },
        r,
    )?;
    run(
        "relative_bias",
        vec![randn(r, &[2, 5]), randn(r, &dq), randn(r, &dk), randn(r, &dv)],
        &|g, v| {
            let bias = g.relative_bias(v[0], 3)?;
            g.attention(v[1], v[2], v[3], 2, Some(bias), AttnMask::None)
        },
        r,
    )?;
    Ok(out)
}

/// Input gradient of `⟨cot, unet(z)⟩` over every entry of `z`.
pub fn unet_input_check(cfg: &UNetConfig, seed: u64, h: f64) -> Result<GradReport> {
    let net = UNet::new(cfg.clone())?;
    let params: ParamMap<f64> = net.init_params(seed);
    let mut rng = rng_for(seed, "gradcheck-unet", 0);
    let dims = [cfg.frames, cfg.spatial_size, cfg.spatial_size, cfg.in_channels];
    let z = randn(&mut rng, &dims);
    let cond = if cfg.num_classes > 0 {
        Conditioning::label(rng.random_range(0..cfg.num_classes))
    } else {
        Conditioning::none()
    };
    let lambda = rng.random_range(-5.0..5.0);
    let f = |g: &Graph<f64>, v: &[Var]| <UNet as Trainable<f64>>::forward(&net, g, &params, v[0], lambda, &cond);
    check_fn("unet_input", &[z], &f, h, &mut rng)
}
