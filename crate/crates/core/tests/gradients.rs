use botkit::attention::{mhsa2d_in, nonlocal_in, MhsaConfig, MhsaParams, NonLocalParams, PosMode};
use botkit::blocks::{block_in, se_gate_in, BlockParams, BlockSpec, SeParams};
use botkit::rng::ParamRng;
use botkit::{grad_check, Activation, Ctx, Result, Tape, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

/// Leaves of a parameter tree in record order.
fn leaves<E>(walk: impl FnOnce(&mut dyn FnMut(&Tensor<f64>)) -> std::result::Result<(), E>) -> Vec<Tensor<f64>>
where
    E: std::fmt::Debug,
{
    let mut out = Vec::new();
    walk(&mut |t| out.push(t.clone())).unwrap();
    out
}

/// Hands out vars[1..] in order (vars[0] is the layer input).
fn next(vars: &[Var]) -> impl FnMut(&str, &Tensor<f64>) -> Result<Var> + '_ {
    let mut i = 0;
    move |_, _| {
        i += 1;
        Ok(vars[i])
    }
}

fn weighted_sum(tape: &mut Tape<f64>, y: &Var, w: &Tensor<f64>) -> Result<Var> {
    let w = tape.input(w.clone());
    let p = tape.mul(y, &w)?;
    tape.sum_all(&p)
}

fn with_x(x: Tensor<f64>, rest: Vec<Tensor<f64>>) -> Vec<Tensor<f64>> {
    std::iter::once(x).chain(rest).collect()
}

#[test]
fn mhsa_gradients_in_every_mode() {
    for mode in [PosMode::Relative, PosMode::Absolute, PosMode::None] {
        for seed in 0..5 {
            let mut rng = ParamRng::new(100 + seed);
            let cfg = MhsaConfig::new(6, 3, 3, 4, mode).unwrap();
            let p = MhsaParams::<Tensor<f64>>::init(&cfg, &mut rng);
            let x: Tensor<f64> = rng.normal(&[2, 6, 3, 4], 1.0);
            let w: Tensor<f64> = rng.normal(&[2, 6, 3, 4], 1.0);
            let ls = leaves(|f| p.map_named("", &mut |_, t| Ok::<_, botkit::Error>(f(t))).map(|_| ()));
            let r = grad_check(
                |tape, vars| {
                    let pv = p.map_named("", &mut next(vars))?;
                    let y = mhsa2d_in(tape, &vars[0], &pv, &cfg)?;
                    weighted_sum(tape, &y, &w)
                },
                &with_x(x, ls),
                H,
            )
            .unwrap();
            assert!(r.max_rel_err < TOL, "{mode:?} seed {seed}: {r:?}");
        }
    }
}

#[test]
fn nonlocal_gradients() {
    for seed in 0..5 {
        let mut rng = ParamRng::new(200 + seed);
        let p = NonLocalParams::<Tensor<f64>>::init(6, &mut rng).unwrap();
        let x: Tensor<f64> = rng.normal(&[2, 6, 3, 3], 1.0);
        let w: Tensor<f64> = rng.normal(&[2, 6, 3, 3], 1.0);
        let ls = leaves(|f| p.map_named("", &mut |_, t| Ok::<_, botkit::Error>(f(t))).map(|_| ()));
        let r = grad_check(
            |tape, vars| {
                let pv = p.map_named("", &mut next(vars))?;
                let y = nonlocal_in(tape, &vars[0], &pv)?;
                weighted_sum(tape, &y, &w)
            },
            &with_x(x, ls),
            H,
        )
        .unwrap();
        assert!(r.max_rel_err < TOL, "seed {seed}: {r:?}");
    }
}

fn check_block(spec: &BlockSpec, shape: [usize; 4], seed: u64) {
    let mut rng = ParamRng::new(seed);
    let p = BlockParams::<Tensor<f64>>::init(spec, &mut rng).unwrap();
    let x: Tensor<f64> = rng.normal(&shape, 1.0);
    let out = [shape[0], spec.out_channels, spec.out_extent(shape[2]), spec.out_extent(shape[3])];
    let w: Tensor<f64> = rng.normal(&out, 1.0);
    let ls = leaves(|f| p.map_named("", &mut |_, t| Ok::<_, botkit::Error>(f(t))).map(|_| ()));
    let r = grad_check(
        |tape, vars| {
            let pv = p.map_named("", &mut next(vars))?;
            let y = block_in(tape, &vars[0], spec, &pv)?;
            weighted_sum(tape, &y, &w)
        },
        &with_x(x, ls),
        H,
    )
    .unwrap();
    assert!(r.max_rel_err < TOL, "{spec:?} seed {seed}: {r:?}");
}

#[test]
fn block_gradients() {
    let act = Activation::Relu;
    let bot1 = BlockSpec::bot(4, 4, 1, MhsaConfig::new(4, 2, 2, 4, PosMode::Relative).unwrap(), act);
    let bot2 = BlockSpec::bot(8, 2, 2, MhsaConfig::new(2, 1, 4, 2, PosMode::Relative).unwrap(), act);
    let conv = BlockSpec::conv_bottleneck(8, 2, 1, act);
    let conv_se = BlockSpec::conv_bottleneck(4, 2, 2, Activation::Silu).with_se(4);
    for seed in 300..305 {
        check_block(&bot1, [2, 4, 2, 4], seed);
        check_block(&bot2, [1, 8, 4, 2], seed);
        check_block(&conv, [2, 8, 3, 3], seed);
        check_block(&conv_se, [2, 4, 4, 5], seed);
    }
}

#[test]
fn se_gate_gradients() {
    for seed in 400..405 {
        let mut rng = ParamRng::new(seed);
        let p = SeParams::<Tensor<f64>>::init(8, 2, &mut rng);
        let x: Tensor<f64> = rng.normal(&[2, 8, 2, 3], 1.0);
        let w: Tensor<f64> = rng.normal(&[2, 8, 2, 3], 1.0);
        let ls = leaves(|f| p.map_named("", &mut |_, t| Ok::<_, botkit::Error>(f(t))).map(|_| ()));
        let r = grad_check(
            |tape, vars| {
                let pv = p.map_named("", &mut next(vars))?;
                let y = se_gate_in(tape, &vars[0], &pv, Activation::Silu)?;
                weighted_sum(tape, &y, &w)
            },
            &with_x(x, ls),
            H,
        )
        .unwrap();
        assert!(r.max_rel_err < TOL, "seed {seed}: {r:?}");
    }
}
