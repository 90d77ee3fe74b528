//! Central finite differences against analytic gradients, in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tinyrm::autodiff::{Tape, Var};
use tinyrm::Result;
use tinyrm::Tensor;

pub const H: f64 = 1e-3;
pub const TOL: f64 = 1e-3;
pub const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

pub type Build = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

pub struct Case {
    pub name: &'static str,
    pub shapes: &'static [&'static [usize]],
    pub build: Build,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces `out` to a scalar through a fixed random projection so that every
/// output element contributes a distinct weight.
fn scalarize(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    if tape.value(out).numel() == 1 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = rand_tensor(&mut rng, tape.value(out).shape());
    let r = tape.constant(r);
    let p = tape.mul(out, r)?;
    tape.sum(p)
}

fn eval(build: Build, inputs: &[Tensor<f64>], seed: u64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let s = scalarize(&mut tape, out, seed).unwrap();
    tape.value(s).data()[0]
}

/// Max elementwise relative error over every input of the case, for one seed.
pub fn max_rel_error(case: &Case, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor<f64>> = case.shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = (case.build)(&mut tape, &vars).unwrap();
    let s = scalarize(&mut tape, out, seed).unwrap();
    let grads = tape.backward(s).unwrap();

    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("every input reaches the loss");
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= H;
            let fd = (eval(case.build, &plus, seed) - eval(case.build, &minus, seed)) / (2.0 * H);
            let a = analytic.data()[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Worst error of `case` over every seed.
pub fn worst_over_seeds(case: &Case) -> f64 {
    SEEDS.iter().map(|&s| max_rel_error(case, s)).fold(0.0, f64::max)
}

pub fn case(name: &str) -> &'static Case {
    CASES.iter().find(|c| c.name == name).unwrap_or_else(|| panic!("no case {name}"))
}

pub static CASES: &[Case] = &[
    Case {
        name: "matmul",
        shapes: &[&[3, 4], &[4, 2]],
        build: |t, v| t.matmul(v[0], v[1]),
    },
    Case {
        name: "matmul_nt",
        shapes: &[&[3, 4], &[5, 4]],
        build: |t, v| t.matmul_nt(v[0], v[1]),
    },
    Case {
        name: "add",
        shapes: &[&[3, 4], &[3, 4]],
        build: |t, v| t.add(v[0], v[1]),
    },
    Case {
        name: "mul",
        shapes: &[&[3, 4], &[3, 4]],
        build: |t, v| t.mul(v[0], v[1]),
    },
    Case {
        name: "add_row",
        shapes: &[&[3, 4], &[4]],
        build: |t, v| t.add_row(v[0], v[1]),
    },
    Case {
        name: "sum",
        shapes: &[&[2, 3]],
        build: |t, v| t.sum(v[0]),
    },
    Case {
        name: "gelu",
        shapes: &[&[3, 5]],
        build: |t, v| t.gelu(v[0]),
    },
    Case {
        name: "softmax axis 1",
        shapes: &[&[3, 4]],
        build: |t, v| t.softmax(v[0], 1),
    },
    Case {
        name: "softmax axis 0",
        shapes: &[&[3, 4]],
        build: |t, v| t.softmax(v[0], 0),
    },
    Case {
        name: "layer_norm",
        shapes: &[&[3, 6], &[6], &[6]],
        build: |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
    },
    Case {
        name: "gather",
        shapes: &[&[5, 3]],
        build: |t, v| t.gather(v[0], &[4, 0, 4, 2]),
    },
    Case {
        name: "select_row",
        shapes: &[&[4, 3]],
        build: |t, v| t.select_row(v[0], 2),
    },
    Case {
        name: "mean_rows",
        shapes: &[&[4, 3]],
        build: |t, v| t.mean_rows(v[0]),
    },
    Case {
        name: "attention",
        shapes: &[&[4, 6], &[4, 6], &[4, 6]],
        build: |t, v| t.attention(v[0], v[1], v[2], 2),
    },
    Case {
        name: "attention 1 head",
        shapes: &[&[3, 4], &[3, 4], &[3, 4]],
        build: |t, v| t.attention(v[0], v[1], v[2], 1),
    },
    Case {
        name: "row_rescale",
        shapes: &[&[3, 5], &[3]],
        build: |t, v| t.row_rescale(v[0], v[1], 1e-8),
    },
    Case {
        // W0 + B·A rescaled per row by m.
        name: "dora",
        shapes: &[&[4, 5], &[2, 5], &[4, 2], &[4]],
        build: |t, v| {
            let ba = t.matmul(v[2], v[1])?;
            let sum = t.add(v[0], ba)?;
            t.row_rescale(sum, v[3], 1e-8)
        },
    },
    Case {
        name: "cross_entropy",
        shapes: &[&[1, 7]],
        build: |t, v| t.cross_entropy(v[0], 3),
    },
    Case {
        name: "bce",
        shapes: &[&[6, 1]],
        build: |t, v| t.bce_with_logits(v[0], &[1, 2, 4, 5], &[1.0, 1.0, 0.0, 0.0]),
    },
    Case {
        // One pre-LN block plus a vocabulary head, the same op sequence the
        // encoder records, with every weight trainable.
        name: "encoder block",
        shapes: &[
            &[6, 4], // token table
            &[3, 4], // position table
            &[4],
            &[4],
            &[4, 4],
            &[4, 4],
            &[4, 4],
            &[4, 4],
            &[4],
            &[4],
            &[8, 4],
            &[4, 8],
            &[6, 4],
            &[6],
        ],
        build: |t, v| {
            let tok = t.gather(v[0], &[1, 5, 2])?;
            let pos = t.gather(v[1], &[0, 1, 2])?;
            let x = t.add(tok, pos)?;
            let h = t.layer_norm(x, v[2], v[3], 1e-5)?;
            let q = t.matmul_nt(h, v[4])?;
            let k = t.matmul_nt(h, v[5])?;
            let vv = t.matmul_nt(h, v[6])?;
            let a = t.attention(q, k, vv, 2)?;
            let o = t.matmul_nt(a, v[7])?;
            let x = t.add(x, o)?;
            let h = t.layer_norm(x, v[8], v[9], 1e-5)?;
            let up = t.matmul_nt(h, v[10])?;
            let act = t.gelu(up)?;
            let down = t.matmul_nt(act, v[11])?;
            let x = t.add(x, down)?;
            let row = t.select_row(x, 2)?;
            let z = t.matmul_nt(row, v[12])?;
            let logits = t.add_row(z, v[13])?;
            t.cross_entropy(logits, 4)
        },
    },
];
