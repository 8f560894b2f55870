//! Central-difference verification suites over every differentiable
//! primitive and the full LN-zoneout LSTM cell, on randomized small shapes.
//!
//! Each entry perturbs one input role of one op while holding the others
//! fixed, compares the backward pass against central differences in f64 and
//! reports the worst relative error over the requested number of seeds.

use crate::diffcore::checkpoint::ParamStore;
use crate::diffcore::fdcheck::finite_diff_check;
use crate::diffcore::graph::{Graph, Var};
use crate::diffcore::tensor::Tensor;
use crate::diffcore::Rng;
use crate::recurrent::{lstm_cell_step, CellZoneout, LstmLayerParams};

pub const TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: String,
    pub max_rel_err: f64,
    pub seeds: u64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

/// Scalarizes a node by a fixed random weighting so every output element
/// influences the objective.
fn weighted_sum(g: &mut Graph<f64>, v: Var, rng_seed: u64) -> Var {
    let shape = g.shape(v).to_vec();
    let mut rng = Rng::seed_from(rng_seed);
    let w = g.input(Tensor::rand_uniform(&shape, 0.5, 1.5, &mut rng));
    let prod = g.mul(v, w).expect("same shape");
    g.sum(prod).expect("sum")
}

fn max_over_seeds(seeds: u64, mut one: impl FnMut(u64) -> f64) -> f64 {
    (0..seeds).map(&mut one).fold(0.0, f64::max)
}

/// Runs the whole suite. `seeds` is the number of random shapes/values per
/// checked input role.
pub fn run_full_suite(seeds: u64) -> Vec<SuiteResult> {
    let mut out = Vec::new();
    let mut push = |name: &str, err: f64| {
        out.push(SuiteResult {
            name: name.to_string(),
            max_rel_err: err,
            seeds,
        });
    };

    // conv2d: gradient w.r.t. input, weight and bias
    push(
        "conv2d/input",
        max_over_seeds(seeds, |s| conv_check(s, ConvRole::Input)),
    );
    push(
        "conv2d/weight",
        max_over_seeds(seeds, |s| conv_check(s, ConvRole::Weight)),
    );
    push(
        "conv2d/bias",
        max_over_seeds(seeds, |s| conv_check(s, ConvRole::Bias)),
    );
    push(
        "linear/input",
        max_over_seeds(seeds, |s| linear_check(s, 0)),
    );
    push(
        "linear/weight",
        max_over_seeds(seeds, |s| linear_check(s, 1)),
    );
    push("linear/bias", max_over_seeds(seeds, |s| linear_check(s, 2)));
    push(
        "matmul_nt/a",
        max_over_seeds(seeds, |s| matmul_nt_check(s, 0)),
    );
    push(
        "matmul_nt/b",
        max_over_seeds(seeds, |s| matmul_nt_check(s, 1)),
    );
    push(
        "layer_norm/input",
        max_over_seeds(seeds, |s| ln_check(s, 0)),
    );
    push(
        "layer_norm/gamma",
        max_over_seeds(seeds, |s| ln_check(s, 1)),
    );
    push("layer_norm/beta", max_over_seeds(seeds, |s| ln_check(s, 2)));
    push(
        "batch_norm/input",
        max_over_seeds(seeds, |s| bn_check(s, 0)),
    );
    push(
        "batch_norm/gamma",
        max_over_seeds(seeds, |s| bn_check(s, 1)),
    );
    push("batch_norm/beta", max_over_seeds(seeds, |s| bn_check(s, 2)));
    push(
        "activation/sigmoid",
        max_over_seeds(seeds, |s| act_check(s, Act::Sigmoid)),
    );
    push(
        "activation/tanh",
        max_over_seeds(seeds, |s| act_check(s, Act::Tanh)),
    );
    push(
        "activation/leaky_relu",
        max_over_seeds(seeds, |s| act_check(s, Act::Leaky)),
    );
    push(
        "softmax_cross_entropy",
        max_over_seeds(seeds, sce_check),
    );

    // elementwise suite
    push("add", max_over_seeds(seeds, |s| ew2_check(s, Ew2::Add)));
    push("sub", max_over_seeds(seeds, |s| ew2_check(s, Ew2::Sub)));
    push("mul", max_over_seeds(seeds, |s| ew2_check(s, Ew2::Mul)));
    push("div", max_over_seeds(seeds, |s| ew2_check(s, Ew2::Div)));
    push("scale", max_over_seeds(seeds, scale_check));
    push("concat", max_over_seeds(seeds, concat_check));
    push("slice", max_over_seeds(seeds, slice_check));
    push("reshape", max_over_seeds(seeds, reshape_check));
    push("mean", max_over_seeds(seeds, mean_check));
    push("sum", max_over_seeds(seeds, sum_check));
    push("sum_axis", max_over_seeds(seeds, sum_axis_check));
    push("sqrt", max_over_seeds(seeds, sqrt_check));
    push("exp", max_over_seeds(seeds, exp_check));
    push("log", max_over_seeds(seeds, log_check));
    push("norm2", max_over_seeds(seeds, norm2_check));
    push("repeat_last", max_over_seeds(seeds, repeat_check));
    push("global_avg_pool", max_over_seeds(seeds, gap_check));

    // full LN-zoneout LSTM cell, every input role
    for (i, role) in ["x", "h", "c", "wx", "wh", "ln1g", "ln1b", "ln2g", "ln2b", "ln3g", "ln3b"]
        .iter()
        .enumerate()
    {
        push(
            &format!("lstm_cell/{role}"),
            max_over_seeds(seeds, |s| lstm_check(s, i)),
        );
    }
    out
}

enum ConvRole {
    Input,
    Weight,
    Bias,
}

fn conv_check(seed: u64, role: ConvRole) -> f64 {
    let mut rng = Rng::seed_from(seed.wrapping_mul(977) + 13);
    let n = 1 + rng.below(2);
    let c = 1 + rng.below(3);
    let f = 1 + rng.below(3);
    let k = [1usize, 3][rng.below(2)];
    let h = k + 2 + rng.below(3);
    let w = k + 2 + rng.below(3);
    let stride = 1 + rng.below(2);
    let pad = rng.below(2).min(k / 2 + 1);
    let input = Tensor::<f64>::randn(&[n, c, h, w], 1.0, &mut rng);
    let weight = Tensor::<f64>::randn(&[f, c, k, k], 0.7, &mut rng);
    let bias = Tensor::<f64>::randn(&[f], 0.5, &mut rng);
    let probe = match role {
        ConvRole::Input => input.clone(),
        ConvRole::Weight => weight.clone(),
        ConvRole::Bias => bias.clone(),
    };
    finite_diff_check(
        |g, leaf| {
            let (iv, wv, bv) = match role {
                ConvRole::Input => (
                    leaf,
                    g.leaf(weight.clone(), false),
                    g.leaf(bias.clone(), false),
                ),
                ConvRole::Weight => (
                    g.leaf(input.clone(), false),
                    leaf,
                    g.leaf(bias.clone(), false),
                ),
                ConvRole::Bias => (
                    g.leaf(input.clone(), false),
                    g.leaf(weight.clone(), false),
                    leaf,
                ),
            };
            let y = g.conv2d(iv, wv, Some(bv), stride, pad).expect("conv");
            weighted_sum(g, y, seed ^ 0xC0)
        },
        &probe,
        EPS,
    )
}

fn linear_check(seed: u64, role: usize) -> f64 {
    let mut rng = Rng::seed_from(seed.wrapping_mul(1009) + 29);
    let n = 1 + rng.below(4);
    let d = 2 + rng.below(4);
    let m = 1 + rng.below(4);
    let tensors = [
        Tensor::<f64>::randn(&[n, d], 1.0, &mut rng),
        Tensor::<f64>::randn(&[d, m], 0.8, &mut rng),
        Tensor::<f64>::randn(&[m], 0.5, &mut rng),
    ];
    finite_diff_check(
        |g, leaf| {
            let vars: Vec<Var> = tensors
                .iter()
                .enumerate()
                .map(|(i, t)| if i == role { leaf } else { g.leaf(t.clone(), false) })
                .collect();
            let y = g.linear(vars[0], vars[1], vars[2]).expect("linear");
            weighted_sum(g, y, seed ^ 0x11)
        },
        &tensors[role],
        EPS,
    )
}

fn matmul_nt_check(seed: u64, role: usize) -> f64 {
    let mut rng = Rng::seed_from(seed.wrapping_mul(1013) + 31);
    let n = 1 + rng.below(3);
    let d = 2 + rng.below(4);
    let m = 1 + rng.below(4);
    let tensors = [
        Tensor::<f64>::randn(&[n, d], 1.0, &mut rng),
        Tensor::<f64>::randn(&[m, d], 0.8, &mut rng),
    ];
    finite_diff_check(
        |g, leaf| {
            let a = if role == 0 {
                leaf
            } else {
                g.leaf(tensors[0].clone(), false)
            };
            let b = if role == 1 {
                leaf
            } else {
                g.leaf(tensors[1].clone(), false)
            };
            let y = g.matmul_nt(a, b).expect("matmul_nt");
            weighted_sum(g, y, seed ^ 0x12)
        },
        &tensors[role],
        EPS,
    )
}

fn ln_check(seed: u64, role: usize) -> f64 {
    let mut rng = Rng::seed_from(seed.wrapping_mul(1019) + 37);
    let rows = 1 + rng.below(4);
    let d = 2 + rng.below(6);
    let tensors = [
        Tensor::<f64>::randn(&[rows, d], 1.0, &mut rng),
        Tensor::<f64>::rand_uniform(&[d], 0.5, 1.5, &mut rng),
        Tensor::<f64>::randn(&[d], 0.5, &mut rng),
    ];
    finite_diff_check(
        |g, leaf| {
            let vars: Vec<Var> = tensors
                .iter()
                .enumerate()
                .map(|(i, t)| if i == role { leaf } else { g.leaf(t.clone(), false) })
                .collect();
            let y = g.layer_norm(vars[0], vars[1], vars[2], 1e-5).expect("ln");
            weighted_sum(g, y, seed ^ 0x13)
        },
        &tensors[role],
        EPS,
    )
}

fn bn_check(seed: u64, role: usize) -> f64 {
    let mut rng = Rng::seed_from(seed.wrapping_mul(1021) + 41);
    let n = 2 + rng.below(2);
    let c = 1 + rng.below(3);
    let h = 2 + rng.below(2);
    let w = 2 + rng.below(2);
    let tensors = [
        Tensor::<f64>::randn(&[n, c, h, w], 1.0, &mut rng),
        Tensor::<f64>::rand_uniform(&[c], 0.5, 1.5, &mut rng),
        Tensor::<f64>::randn(&[c], 0.5, &mut rng),
    ];
    finite_diff_check(
        |g, leaf| {
            let vars: Vec<Var> = tensors
                .iter()
                .enumerate()
                .map(|(i, t)| if i == role { leaf } else { g.leaf(t.clone(), false) })
                .collect();
            let (y, _, _) = g
                .batch_norm_train(vars[0], vars[1], vars[2], 1e-5)
                .expect("bn");
            weighted_sum(g, y, seed ^ 0x14)
        },
        &tensors[role],
        EPS,
    )
}

enum Act {
    Sigmoid,
    Tanh,
    Leaky,
}

fn act_check(seed: u64, act: Act) -> f64 {
    let mut rng = Rng::seed_from(seed.wrapping_mul(1031) + 43);
    let n = 2 + rng.below(6);
    // keep values away from the leaky-relu kink, which has no derivative
    let x = {
        let mut t = Tensor::<f64>::randn(&[n], 1.0, &mut rng);
        for v in t.data_mut() {
            if v.abs() < 1e-3 {
                *v += 0.01;
            }
        }
        t
    };
    finite_diff_check(
        |g, leaf| {
            let y = match act {
                Act::Sigmoid => g.sigmoid(leaf),
                Act::Tanh => g.tanh(leaf),
                Act::Leaky => g.leaky_relu(leaf, 0.1),
            }
            .expect("activation");
            weighted_sum(g, y, seed ^ 0x15)
        },
        &x,
        EPS,
    )
}

fn sce_check(seed: u64) -> f64 {
    let mut rng = Rng::seed_from(seed.wrapping_mul(1033) + 47);
    let n = 1 + rng.below(4);
    let k = 2 + rng.below(5);
    let logits = Tensor::<f64>::randn(&[n, k], 2.0, &mut rng);
    let mut hot = Tensor::<f64>::zeros(&[n, k]);
    for r in 0..n {
        let c = rng.below(k);
        hot.data_mut()[r * k + c] = 1.0;
    }
    finite_diff_check(
        |g, leaf| g.softmax_cross_entropy(leaf, &hot).expect("sce"),
        &logits,
        EPS,
    )
}

enum Ew2 {
    Add,
    Sub,
    Mul,
    Div,
}

fn ew2_check(seed: u64, op: Ew2) -> f64 {
    let mut rng = Rng::seed_from(seed.wrapping_mul(1039) + 53);
    let n = 2 + rng.below(6);
    let a = Tensor::<f64>::randn(&[n], 1.0, &mut rng);
    // denominators bounded away from zero
    let b = Tensor::<f64>::rand_uniform(&[n], 0.5, 2.0, &mut rng);
    let worst_a = finite_diff_check(
        |g, leaf| {
            let bv = g.leaf(b.clone(), false);
            let y = match op {
                Ew2::Add => g.add(leaf, bv),
                Ew2::Sub => g.sub(leaf, bv),
                Ew2::Mul => g.mul(leaf, bv),
                Ew2::Div => g.div(leaf, bv),
            }
            .expect("ew");
            weighted_sum(g, y, seed ^ 0x16)
        },
        &a,
        EPS,
    );
    let worst_b = finite_diff_check(
        |g, leaf| {
            let av = g.leaf(a.clone(), false);
            let y = match op {
                Ew2::Add => g.add(av, leaf),
                Ew2::Sub => g.sub(av, leaf),
                Ew2::Mul => g.mul(av, leaf),
                Ew2::Div => g.div(av, leaf),
            }
            .expect("ew");
            weighted_sum(g, y, seed ^ 0x17)
        },
        &b,
        EPS,
    );
    worst_a.max(worst_b)
}

fn scale_check(seed: u64) -> f64 {
    let mut rng = Rng::seed_from(seed.wrapping_mul(1049) + 59);
    let x = Tensor::<f64>::randn(&[3 + rng.below(4)], 1.0, &mut rng);
    let factor = rng.uniform_in(-2.0, 2.0);
    finite_diff_check(
        |g, leaf| {
            let y = g.scale(leaf, factor).expect("scale");
            weighted_sum(g, y, seed ^ 0x18)
        },
        &x,
        EPS,
    )
}

fn concat_check(seed: u64) -> f64 {
    let mut rng = Rng::seed_from(seed.wrapping_mul(1051) + 61);
    let rows = 1 + rng.below(3);
    let c1 = 1 + rng.below(3);
    let c2 = 1 + rng.below(3);
    let a = Tensor::<f64>::randn(&[rows, c1], 1.0, &mut rng);
    let b = Tensor::<f64>::randn(&[rows, c2], 1.0, &mut rng);
    finite_diff_check(
        |g, leaf| {
            let bv = g.leaf(b.clone(), false);
            let y = g.concat(&[leaf, bv], 1).expect("concat");
            weighted_sum(g, y, seed ^ 0x19)
        },
        &a,
        EPS,
    )
}

fn slice_check(seed: u64) -> f64 {
    let mut rng = Rng::seed_from(seed.wrapping_mul(1061) + 67);
    let rows = 1 + rng.below(3);
    let cols = 3 + rng.below(4);
    let start = rng.below(cols - 1);
    let len = 1 + rng.below(cols - start - 1).min(cols - start - 1).max(0);
    let x = Tensor::<f64>::randn(&[rows, cols], 1.0, &mut rng);
    finite_diff_check(
        |g, leaf| {
            let y = g.slice(leaf, 1, start, len.max(1)).expect("slice");
            weighted_sum(g, y, seed ^ 0x1A)
        },
        &x,
        EPS,
    )
}

fn reshape_check(seed: u64) -> f64 {
    let mut rng = Rng::seed_from(seed.wrapping_mul(1063) + 71);
    let a = 2 + rng.below(3);
    let b = 2 + rng.below(3);
    let x = Tensor::<f64>::randn(&[a, b], 1.0, &mut rng);
    finite_diff_check(
        |g, leaf| {
            let y = g.reshape(leaf, &[b * a]).expect("reshape");
            weighted_sum(g, y, seed ^ 0x1B)
        },
        &x,
        EPS,
    )
}

fn mean_check(seed: u64) -> f64 {
    let mut rng = Rng::seed_from(seed.wrapping_mul(1069) + 73);
    let x = Tensor::<f64>::randn(&[2 + rng.below(5)], 1.0, &mut rng);
    finite_diff_check(|g, leaf| g.mean(leaf).expect("mean"), &x, EPS)
}

fn sum_check(seed: u64) -> f64 {
    let mut rng = Rng::seed_from(seed.wrapping_mul(1087) + 79);
    let x = Tensor::<f64>::randn(&[2 + rng.below(5)], 1.0, &mut rng);
    finite_diff_check(|g, leaf| g.sum(leaf).expect("sum"), &x, EPS)
}

fn sum_axis_check(seed: u64) -> f64 {
    let mut rng = Rng::seed_from(seed.wrapping_mul(1091) + 83);
    let rows = 2 + rng.below(3);
    let cols = 2 + rng.below(3);
    let axis = rng.below(2);
    let x = Tensor::<f64>::randn(&[rows, cols], 1.0, &mut rng);
    finite_diff_check(
        |g, leaf| {
            let y = g.sum_axis(leaf, axis).expect("sum_axis");
            weighted_sum(g, y, seed ^ 0x1C)
        },
        &x,
        EPS,
    )
}

fn sqrt_check(seed: u64) -> f64 {
    let mut rng = Rng::seed_from(seed.wrapping_mul(1093) + 89);
    let x = Tensor::<f64>::rand_uniform(&[3 + rng.below(4)], 0.3, 4.0, &mut rng);
    finite_diff_check(
        |g, leaf| {
            let y = g.sqrt(leaf).expect("sqrt");
            weighted_sum(g, y, seed ^ 0x1D)
        },
        &x,
        EPS,
    )
}

fn exp_check(seed: u64) -> f64 {
    let mut rng = Rng::seed_from(seed.wrapping_mul(1097) + 97);
    let x = Tensor::<f64>::randn(&[3 + rng.below(4)], 1.0, &mut rng);
    finite_diff_check(
        |g, leaf| {
            let y = g.exp(leaf).expect("exp");
            weighted_sum(g, y, seed ^ 0x1E)
        },
        &x,
        EPS,
    )
}

fn log_check(seed: u64) -> f64 {
    let mut rng = Rng::seed_from(seed.wrapping_mul(1103) + 101);
    let x = Tensor::<f64>::rand_uniform(&[3 + rng.below(4)], 0.3, 4.0, &mut rng);
    finite_diff_check(
        |g, leaf| {
            let y = g.log(leaf).expect("log");
            weighted_sum(g, y, seed ^ 0x1F)
        },
        &x,
        EPS,
    )
}

fn norm2_check(seed: u64) -> f64 {
    let mut rng = Rng::seed_from(seed.wrapping_mul(1109) + 103);
    // bounded away from the origin where the norm is not differentiable
    let x = Tensor::<f64>::rand_uniform(&[3 + rng.below(4)], 0.5, 2.0, &mut rng);
    finite_diff_check(|g, leaf| g.norm2(leaf).expect("norm2"), &x, EPS)
}

fn repeat_check(seed: u64) -> f64 {
    let mut rng = Rng::seed_from(seed.wrapping_mul(1117) + 107);
    let rows = 2 + rng.below(4);
    let copies = 2 + rng.below(3);
    let x = Tensor::<f64>::randn(&[rows, 1], 1.0, &mut rng);
    finite_diff_check(
        |g, leaf| {
            let y = g.repeat_last(leaf, copies).expect("repeat_last");
            weighted_sum(g, y, seed ^ 0x20)
        },
        &x,
        EPS,
    )
}

fn gap_check(seed: u64) -> f64 {
    let mut rng = Rng::seed_from(seed.wrapping_mul(1123) + 109);
    let x = Tensor::<f64>::randn(&[1 + rng.below(2), 1 + rng.below(3), 2, 3], 1.0, &mut rng);
    finite_diff_check(
        |g, leaf| {
            let y = g.global_avg_pool(leaf).expect("gap");
            weighted_sum(g, y, seed ^ 0x21)
        },
        &x,
        EPS,
    )
}

/// One LSTM cell step with train-mode zoneout masks, checked w.r.t. the
/// given input role (x, h, c or one of the eight parameter tensors).
fn lstm_check(seed: u64, role: usize) -> f64 {
    let mut rng = Rng::seed_from(seed.wrapping_mul(1129) + 113);
    let hidden = 3 + rng.below(5); // up to 8
    let d_in = 2 + rng.below(4);
    let batch = 1 + rng.below(2);
    let mut store = ParamStore::<f64>::new();
    let params = LstmLayerParams::build(&mut store, "cell", d_in, hidden, &mut rng);
    let x = Tensor::<f64>::randn(&[batch, d_in], 1.0, &mut rng);
    let h = Tensor::<f64>::randn(&[batch, hidden], 0.7, &mut rng);
    let c = Tensor::<f64>::randn(&[batch, hidden], 0.7, &mut rng);
    // fixed binary masks for the step
    let keep_c = {
        let data: Vec<f64> = (0..batch * hidden)
            .map(|_| if rng.bernoulli(0.15) { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(vec![batch, hidden], data).unwrap()
    };
    let keep_h = {
        let data: Vec<f64> = (0..batch * hidden)
            .map(|_| if rng.bernoulli(0.15) { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(vec![batch, hidden], data).unwrap()
    };
    let run_cell = |g: &mut Graph<f64>, xv: Var, hv: Var, cv: Var| -> Var {
        let (h1, c1) = lstm_cell_step(
            g,
            &params,
            xv,
            hv,
            cv,
            CellZoneout::Train {
                keep_c: &keep_c,
                keep_h: &keep_h,
            },
            false,
        )
        .expect("cell");
        let a = weighted_sum(g, h1, seed ^ 0x22);
        let b = weighted_sum(g, c1, seed ^ 0x23);
        g.add(a, b).expect("scalar add")
    };

    if role < 3 {
        let probe = match role {
            0 => x.clone(),
            1 => h.clone(),
            _ => c.clone(),
        };
        return finite_diff_check(
            |g, leaf| {
                let xv = if role == 0 { leaf } else { g.leaf(x.clone(), false) };
                let hv = if role == 1 { leaf } else { g.leaf(h.clone(), false) };
                let cv = if role == 2 { leaf } else { g.leaf(c.clone(), false) };
                run_cell(g, xv, hv, cv)
            },
            &probe,
            EPS,
        );
    }

    // parameter roles: analytic gradient accumulates into the parameter,
    // numeric probe perturbs its value in place
    let target = match role - 3 {
        0 => &params.wx,
        1 => &params.wh,
        2 => &params.ln1.0,
        3 => &params.ln1.1,
        4 => &params.ln2.0,
        5 => &params.ln2.1,
        6 => &params.ln3.0,
        _ => &params.ln3.1,
    };
    let base = target.value();
    store.zero_grads();
    {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), false);
        let hv = g.leaf(h.clone(), false);
        let cv = g.leaf(c.clone(), false);
        let root = run_cell(&mut g, xv, hv, cv);
        g.backward(root).expect("backward");
    }
    let analytic = target.grad();
    let err = crate::diffcore::fdcheck::finite_diff_against(
        |probe| {
            target.set_value(probe.clone());
            let mut g = Graph::new();
            let xv = g.leaf(x.clone(), false);
            let hv = g.leaf(h.clone(), false);
            let cv = g.leaf(c.clone(), false);
            let root = run_cell(&mut g, xv, hv, cv);
            g.value(root).item()
        },
        &base,
        &analytic,
        EPS,
    );
    target.set_value(base);
    err
}

#[cfg(test)]
mod tests {
    use super::*;

    // the full 20-seed run lives in the acceptance suite; this is the
    // fast smoke variant
    #[test]
    fn suite_passes_with_three_seeds() {
        for r in run_full_suite(3) {
            assert!(
                r.passed(),
                "{}: max rel err {} over {} seeds",
                r.name,
                r.max_rel_err,
                r.seeds
            );
        }
    }
}
