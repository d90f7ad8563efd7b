use camcls::autodiff::{stack, Tape, Var};
use camcls::cam::PixelBox;
use camcls::cpe::cpe_loss_on_map;
use camcls::snapmix::{mixed_bce_var, VirtualSample};
use camcls::{Model, ModelConfig, Result, Tensor};
use crate::oracles::{fd_gradient, max_rel_err};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Gradient entries smaller than this are compared absolutely.
pub const SCALE_FLOOR: f64 = 1e-3;
pub const CONFIGS: u64 = 24;

pub type Build = dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Uniform in `±[0.05, 1]`, keeping inputs of kinked ops off the kink.
fn signed(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mag = uniform(rng, shape, 0.05, 1.0);
    let data = mag.data().iter().map(|&v| if rng.gen::<bool>() { v } else { -v }).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduces any output to a scalar with fixed random weights so every output
/// entry contributes to the checked gradient.
fn project<'t>(tape: &'t Tape, out: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let weights = uniform(&mut rng, &out.shape(), -1.0, 1.0);
    out.mul(tape.constant(weights))?.sum()
}

fn eval(build: &Build, inputs: &[Tensor]) -> f64 {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    build(&tape, &vars).unwrap().item()
}

/// Largest relative disagreement between the tape gradient and finite
/// differences over all inputs.
fn check(build: &Build, inputs: &[Tensor]) -> f64 {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).into_data();
        let numeric = fd_gradient(
            |x| {
                let mut probe = inputs.to_vec();
                probe[k] = Tensor::new(input.shape().to_vec(), x.to_vec()).unwrap();
                eval(build, &probe)
            },
            input.data(),
            STEP,
        );
        worst = worst.max(max_rel_err(&analytic, &numeric, SCALE_FLOOR));
    }
    worst
}

/// Draws one randomized configuration: the inputs and the scalar function
/// of them whose gradient is checked.
pub type Maker = fn(u64, &mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build>);

/// Worst relative error of `make` over `CONFIGS` seeds, with the seed that
/// produced it.
pub fn worst_error(make: Maker) -> (f64, u64) {
    (0..CONFIGS)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (inputs, build) = make(seed, &mut rng);
            (check(build.as_ref(), &inputs), seed)
        })
        .fold((0.0, 0), |a, b| if b.0 > a.0 { b } else { a })
}

fn conv2d(seed: u64, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build>) {
        let (n, c, o) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
        let (h, w) = (rng.gen_range(3..7), rng.gen_range(3..7));
        let k = [1, 3][rng.gen_range(0..2)];
        let stride = rng.gen_range(1..3);
        let pad = rng.gen_range(0..=k / 2);
        let inputs = vec![uniform(rng, &[n, c, h, w], -1.0, 1.0), uniform(rng, &[o, c, k, k], -1.0, 1.0)];
        let build: Box<Build> = Box::new(move |t, v| project(t, v[0].conv2d(v[1], stride, pad)?, seed));
        (inputs, build)
}

fn channel_bias_and_relu(seed: u64, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build>) {
        let c = rng.gen_range(1..4);
        let x = signed(rng, &[1, c, 3, 4]);
        // A zero bias keeps the ReLU inputs at the sampled, kink-free values.
        let inputs = vec![x, Tensor::zeros(&[c])];
        let build: Box<Build> = Box::new(move |t, v| project(t, v[0].add_channel_bias(v[1])?.relu()?, seed));
        (inputs, build)
}

fn elementwise(seed: u64, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build>) {
        let shape = [rng.gen_range(1..4), rng.gen_range(1..5)];
        let factor = rng.gen_range(-2.0..2.0);
        let inputs = vec![uniform(rng, &shape, -3.0, 3.0), uniform(rng, &shape, -3.0, 3.0)];
        let build: Box<Build> = Box::new(move |t, v| {
            let s = v[0].sigmoid()?.mul(v[1])?;
            let d = v[0].sub(v[1])?.scale(factor)?;
            project(t, s.add(d)?, seed)
        });
        (inputs, build)
}

fn reduction(_: u64, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build>) {
        let shape = [1, rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4)];
        let inputs = vec![uniform(rng, &shape, -1.0, 1.0)];
        let build: Box<Build> = Box::new(|_, v| {
            let a = v[0].sum()?;
            let b = v[0].mul(v[0])?.mean()?;
            a.add(b)
        });
        (inputs, build)
}

fn gap_and_linear(seed: u64, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build>) {
        let (n, c, o) = (rng.gen_range(1..3), rng.gen_range(1..5), rng.gen_range(1..3));
        let inputs = vec![
            uniform(rng, &[n, c, 3, 2], -1.0, 1.0),
            uniform(rng, &[o, c], -1.0, 1.0),
            uniform(rng, &[o], -1.0, 1.0),
        ];
        let build: Box<Build> = Box::new(move |t, v| project(t, v[0].gap()?.linear(v[1], v[2])?, seed));
        (inputs, build)
}

fn bce(_: u64, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build>) {
        let target = [0.0, 1.0, rng.gen_range(0.0..1.0)][rng.gen_range(0..3)];
        let inputs = vec![uniform(rng, &[1, 1], -6.0, 6.0)];
        let build: Box<Build> = Box::new(move |_, v| v[0].bce_loss(target));
        (inputs, build)
}

fn dot_and_softmax(_: u64, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build>) {
        let d = rng.gen_range(1..6);
        let inputs = vec![uniform(rng, &[d], -2.0, 2.0), uniform(rng, &[d], -2.0, 2.0), uniform(rng, &[d], -2.0, 2.0)];
        let build: Box<Build> = Box::new(|_, v| {
            let terms = [v[0].dot(v[1])?, v[1].dot(v[2])?, v[0].dot(v[2])?];
            let s = stack(&terms)?;
            s.logsumexp()?.add(s.log1p_sum_exp()?)
        });
        (inputs, build)
}

fn select_cell(_: u64, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build>) {
        let (c, g) = (rng.gen_range(1..5), rng.gen_range(2..4));
        let (i, j) = (rng.gen_range(0..g), rng.gen_range(0..g));
        let inputs = vec![uniform(rng, &[1, c, g, g], -1.0, 1.0)];
        let build: Box<Build> = Box::new(move |_, v| {
            let cell = v[0].select_cell(i, j)?;
            cell.dot(cell)
        });
        (inputs, build)
}

fn cpe(_: u64, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build>) {
        let c = rng.gen_range(1..6);
        let inputs = vec![uniform(rng, &[1, c, 2, 2], -1.5, 1.5)];
        let cells = [(0, 0), (0, 1), (1, 1), (1, 0)];
        let build: Box<Build> = Box::new(move |_, v| cpe_loss_on_map(v[0], &cells));
        (inputs, build)
}

/// Every differentiable operation, grouped into small graphs.
pub const OP_CASES: &[(&str, Maker)] = &[
    ("conv2d", conv2d),
    ("bias+relu", channel_bias_and_relu),
    ("elementwise", elementwise),
    ("reductions", reduction),
    ("gap+linear", gap_and_linear),
    ("bce", bce),
    ("dot+lse", dot_and_softmax),
    ("select_cell", select_cell),
    ("cpe", cpe),
];

fn composite_value(model: &Model, sample: &VirtualSample, cells: &[(usize, usize); 4]) -> (f64, Vec<Vec<f64>>) {
    let tape = Tape::new();
    let fwd = model.forward_on_tape(&tape, &sample.image, true).unwrap();
    let loss = mixed_bce_var(fwd.logit, sample)
        .and_then(|l| l.add(cpe_loss_on_map(fwd.feature_map, cells)?))
        .unwrap();
    let grads = tape.backward(loss).unwrap();
    (loss.item(), fwd.params.iter().map(|&p| grads.wrt(p).into_data()).collect())
}

/// Mixed BCE plus CPE through the whole network, differentiated with respect
/// to every parameter. The virtual sample and the CPE cells are held fixed.
/// Returns the worst relative error and the parameter it occurred in.
pub fn composite_error(seed: u64) -> (f64, String) {
    let mut worst = (0.0, String::new());
    {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let size = [8, 16][rng.gen_range(0..2)];
        let model = Model::build(ModelConfig::new(size, 2, rng.gen_range(2..5), seed)).unwrap();
        let sample = VirtualSample {
            image: uniform(&mut rng, &[1, size, size], -1.0, 1.0),
            label_a: rng.gen_range(0..2),
            label_b: rng.gen_range(0..2),
            weight_a: rng.gen_range(0.0..1.0),
            weight_b: rng.gen_range(0.0..1.0),
            box_a: PixelBox::new(0, 0, 2, 2),
            box_b: PixelBox::new(1, 1, 2, 2),
            rho_a: 0.5,
            rho_b: 0.5,
        };
        let mut cells = [(0, 0), (0, 1), (1, 0), (1, 1)];
        for i in (1..4).rev() {
            cells.swap(i, rng.gen_range(0..=i));
        }
        let (_, analytic) = composite_value(&model, &sample, &cells);
        let values: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();
        for (k, param) in values.iter().enumerate() {
            let numeric = fd_gradient(
                |x| {
                    let mut probe = values.clone();
                    probe[k] = Tensor::new(param.shape().to_vec(), x.to_vec()).unwrap();
                    let mut m = model.clone();
                    m.set_param_values(probe).unwrap();
                    composite_value(&m, &sample, &cells).0
                },
                param.data(),
                STEP,
            );
            let err = max_rel_err(&analytic[k], &numeric, SCALE_FLOOR);
            if err > worst.0 {
                worst = (err, model.params()[k].name.clone());
            }
        }
    }
    worst
}
