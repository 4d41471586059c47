//! Randomised cross-checking of the autodiff modes.
//!
//! Builds small random programs out of smooth primitives, executes the same
//! instruction list as plain tensors, on a tape, and with dual numbers, and
//! compares every derivative against central finite differences. Kinked ops
//! (relu, clamp, step) are excluded here — finite differences are unreliable
//! near their corners — and are covered by exact unit tests instead.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dual::Dual;
use super::fdiff::{grad_central, jvp_central, max_rel_err, rel_err};
use super::tape::Tape;
use super::tensor::Tensor;
use super::value::Value;
use super::AdError;

const ROWS: usize = 2;
const COLS: usize = 3;

/// One step of a random program. Indices refer to the growing value pool;
/// index 0..4 are the leaves (three `[2,3]` inputs and one `[3,2]` mixer).
#[derive(Debug, Clone)]
enum Instr {
    Unary(UnaryOp, usize),
    Binary(BinaryOp, usize, usize),
    /// `pool[a] @ w @ w^T`, staying `[2,3]`.
    MatVia(usize),
    /// `concat(a, b)` then a column slice back to `[2,3]`.
    ConcatSlice(usize, usize),
    /// `row_l2norm(a^2 + 0.1)` broadcast back over columns.
    RowNormSpread(usize),
    /// `row_dot(a, b)` broadcast as rows, mixed through `c`.
    RowDotSpread(usize, usize, usize),
}

#[derive(Debug, Clone, Copy)]
enum UnaryOp {
    Square,
    Sin,
    Cos,
    Tanh,
    Gelu,
    /// `exp(tanh(x)/2)` — exp with a bounded argument.
    ExpBounded,
    /// `log(x^2 + 0.5)` — log with a positive argument.
    LogShifted,
    /// `sqrt(x^2 + 0.5)`.
    SqrtShifted,
    Scale,
    AddScalar,
}

#[derive(Debug, Clone, Copy)]
enum BinaryOp {
    Add,
    Sub,
    Mul,
    /// `a / (b^2 + 1)` — division with a denominator bounded away from zero.
    DivShifted,
}

#[derive(Debug, Clone)]
struct Program {
    instrs: Vec<Instr>,
    /// Pool indices folded into the scalar root.
    root_terms: Vec<usize>,
}

/// Index of the `[3,2]` mixer leaf in the pool.
const W_LEAF: usize = 3;
const N_LEAVES: usize = 4;

fn gen_program(rng: &mut ChaCha8Rng, n_instrs: usize) -> Program {
    let mut instrs = Vec::with_capacity(n_instrs);
    let mut pool_len = N_LEAVES;
    // Pool slots holding [2,3] values (the mixer leaf is excluded).
    let mut mat_slots: Vec<usize> = vec![0, 1, 2];
    let mut growth_budget = 3usize;

    for _ in 0..n_instrs {
        let pick = |rng: &mut ChaCha8Rng, slots: &[usize]| slots[rng.random_range(0..slots.len())];
        let roll = rng.random_range(0..10);
        let instr = match roll {
            0..=3 => {
                let ops = [
                    UnaryOp::Sin,
                    UnaryOp::Cos,
                    UnaryOp::Tanh,
                    UnaryOp::Gelu,
                    UnaryOp::ExpBounded,
                    UnaryOp::LogShifted,
                    UnaryOp::SqrtShifted,
                    UnaryOp::Scale,
                    UnaryOp::AddScalar,
                    UnaryOp::Square,
                ];
                let mut op = ops[rng.random_range(0..ops.len())];
                if matches!(op, UnaryOp::Square) {
                    if growth_budget == 0 {
                        op = UnaryOp::Tanh;
                    } else {
                        growth_budget -= 1;
                    }
                }
                Instr::Unary(op, pick(rng, &mat_slots))
            }
            4..=6 => {
                let ops = [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::DivShifted];
                let mut op = ops[rng.random_range(0..ops.len())];
                if matches!(op, BinaryOp::Mul) {
                    if growth_budget == 0 {
                        op = BinaryOp::Add;
                    } else {
                        growth_budget -= 1;
                    }
                }
                Instr::Binary(op, pick(rng, &mat_slots), pick(rng, &mat_slots))
            }
            7 => {
                if growth_budget > 0 {
                    growth_budget -= 1;
                    Instr::MatVia(pick(rng, &mat_slots))
                } else {
                    Instr::Unary(UnaryOp::Tanh, pick(rng, &mat_slots))
                }
            }
            8 => Instr::ConcatSlice(pick(rng, &mat_slots), pick(rng, &mat_slots)),
            _ => {
                if rng.random_bool(0.5) {
                    Instr::RowNormSpread(pick(rng, &mat_slots))
                } else {
                    Instr::RowDotSpread(
                        pick(rng, &mat_slots),
                        pick(rng, &mat_slots),
                        pick(rng, &mat_slots),
                    )
                }
            }
        };
        instrs.push(instr);
        mat_slots.push(pool_len);
        pool_len += 1;
    }

    // Fold the final value plus a couple of random pool entries into the root
    // so most leaves influence the output.
    let mut root_terms = vec![pool_len - 1];
    for _ in 0..2 {
        root_terms.push(mat_slots[rng.random_range(0..mat_slots.len())]);
    }
    Program { instrs, root_terms }
}

/// Executes the program in any autodiff mode. `leaves` must hold the three
/// `[2,3]` inputs followed by the `[3,2]` mixer.
fn exec<V: Value>(program: &Program, leaves: &[V]) -> Result<V, AdError> {
    let mut pool: Vec<V> = leaves.to_vec();
    let w = &leaves[W_LEAF];
    for instr in &program.instrs {
        let v = match instr {
            Instr::Unary(op, a) => {
                let x = &pool[*a];
                match op {
                    UnaryOp::Square => x.square()?,
                    UnaryOp::Sin => x.sin()?,
                    UnaryOp::Cos => x.cos()?,
                    UnaryOp::Tanh => x.tanh()?,
                    UnaryOp::Gelu => x.gelu()?,
                    UnaryOp::ExpBounded => x.tanh()?.scale(0.5)?.exp()?,
                    UnaryOp::LogShifted => x.square()?.add_scalar(0.5)?.log()?,
                    UnaryOp::SqrtShifted => x.square()?.add_scalar(0.5)?.sqrt()?,
                    UnaryOp::Scale => x.scale(-1.3)?,
                    UnaryOp::AddScalar => x.add_scalar(0.4)?,
                }
            }
            Instr::Binary(op, a, b) => {
                let (x, y) = (&pool[*a], &pool[*b]);
                match op {
                    BinaryOp::Add => x.add(y)?,
                    BinaryOp::Sub => x.sub(y)?,
                    BinaryOp::Mul => x.mul(y)?,
                    BinaryOp::DivShifted => x.div(&y.square()?.add_scalar(1.0)?)?,
                }
            }
            Instr::MatVia(a) => pool[*a].matmul(w)?.matmul(&w.transpose()?)?,
            Instr::ConcatSlice(a, b) => {
                let cat = V::concat_cols(&[&pool[*a], &pool[*b]])?;
                cat.slice_cols(COLS - 1, 2 * COLS - 1)?
            }
            Instr::RowNormSpread(a) => pool[*a]
                .square()?
                .add_scalar(0.1)?
                .row_l2norm()?
                .broadcast_col(COLS)?,
            Instr::RowDotSpread(a, b, c) => pool[*a]
                .row_dot(&pool[*b])?
                .broadcast_row(ROWS)?
                .matmul(&pool[*c])?,
        };
        pool.push(v);
    }

    let mut root = pool[program.root_terms[0]].mean()?;
    for (k, &term) in program.root_terms.iter().enumerate().skip(1) {
        let extra = if k % 2 == 0 {
            pool[term].sum()?.scale(0.05)?
        } else {
            pool[term].mean()?.scale(0.3)?
        };
        root = root.add(&extra)?;
    }
    Ok(root)
}

/// Outcome of checking one random graph.
#[derive(Debug, Clone)]
pub struct GraphCheck {
    pub seed: u64,
    pub n_instrs: usize,
    /// Max relative error between tape gradients and central differences.
    pub reverse_max_rel_err: f64,
    /// Relative error between the dual-number directional derivative and the
    /// central-difference directional derivative.
    pub jvp_rel_err: f64,
    /// Whether plain, tape, and dual evaluation produced bit-identical roots.
    pub values_bitwise_equal: bool,
}

/// Builds one random graph from `seed` and cross-checks all modes against
/// central differences with step `h`.
pub fn check_random_graph(seed: u64, h: f64) -> Result<GraphCheck, AdError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_instrs = rng.random_range(5..=10);
    let program = gen_program(&mut rng, n_instrs);

    let mut leaves: Vec<Tensor> = Vec::with_capacity(N_LEAVES);
    for _ in 0..3 {
        let data: Vec<f64> = (0..ROWS * COLS).map(|_| rng.random_range(-1.5..1.5)).collect();
        leaves.push(Tensor::from_raw(vec![ROWS, COLS], data));
    }
    let wdata: Vec<f64> = (0..COLS * ROWS).map(|_| rng.random_range(-1.0..1.0)).collect();
    leaves.push(Tensor::from_raw(vec![COLS, ROWS], wdata));

    let tangents: Vec<Tensor> = leaves
        .iter()
        .map(|l| {
            let data = (0..l.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
            Tensor::from_raw(l.shape().to_vec(), data)
        })
        .collect();

    // Plain evaluation.
    let root_plain = exec(&program, &leaves)?.scalar_value()?;

    // Reverse mode.
    let tape = Tape::new();
    let vars: Vec<_> = leaves
        .iter()
        .map(|l| tape.param(l.clone()))
        .collect::<Result<_, _>>()?;
    let root_var = exec(&program, &vars)?;
    tape.freeze();
    let grads = tape.backward(&root_var)?;

    let fd_grads = grad_central(|ins| exec(&program, ins)?.scalar_value(), &leaves, h)?;
    let mut reverse_max = 0.0f64;
    for (var, fd) in vars.iter().zip(&fd_grads) {
        let ad = grads.get(var.id()).expect("leaf gradient present");
        reverse_max = reverse_max.max(max_rel_err(ad, fd)?);
    }

    // Forward mode.
    let duals: Vec<Dual<Tensor>> = leaves
        .iter()
        .zip(&tangents)
        .map(|(p, t)| Dual::with_tangent(p.clone(), t.clone()))
        .collect::<Result<_, _>>()?;
    let dual_root = exec(&program, &duals)?;
    let jvp_ad = dual_root.tangent_tensor().scalar_value()?;
    let jvp_fd = jvp_central(|ins| Ok(exec(&program, ins)?.to_tensor()), &leaves, &tangents, h)?
        .scalar_value()?;
    let jvp_err = rel_err(jvp_ad, jvp_fd);

    let values_bitwise_equal = root_var.value().scalar_value()? == root_plain
        && dual_root.to_tensor().scalar_value()? == root_plain;

    Ok(GraphCheck {
        seed,
        n_instrs,
        reverse_max_rel_err: reverse_max,
        jvp_rel_err: jvp_err,
        values_bitwise_equal,
    })
}
