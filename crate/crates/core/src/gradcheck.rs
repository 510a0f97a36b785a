//! Central finite-difference verification of tape gradients.

use std::collections::BTreeMap;

use crate::autograd::{NodeId, OpKind, Tape};
use crate::fusion::{forward_nodes, init_params, ArchConfig};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Floor applied to the relative-error denominator.
    pub denom_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            denom_floor: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates skipped because a perturbation crossed a relu kink or
    /// changed a max-pool winner.
    pub skipped: usize,
}

/// Compares `backward()` against central differences for every coordinate
/// of every input. `f` must build an output from leaf nodes holding
/// `inputs` (in order) and be deterministic. A non-scalar output is reduced
/// with fixed, uneven weights, so the check covers a vector-Jacobian product.
pub fn grad_check<T, F>(f: F, inputs: &[Tensor<T>], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Tensor<T>]| -> Result<(Tape<T>, Vec<NodeId>, NodeId)> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = f(&mut tape, &ids)?;
        Ok((tape, ids, out))
    };

    let (tape, ids, out) = eval(inputs)?;
    let (rows, cols) = tape.value(out).shape();
    let seed = Tensor::from_vec(rows, cols, (0..rows * cols).map(|k| T::lit(seed_weight(k))).collect())?;
    let reduce = |tape: &Tape<T>, id: NodeId| -> f64 {
        tape.value(id)
            .data()
            .iter()
            .zip(seed.data())
            .map(|(v, w)| v.as_f64() * w.as_f64())
            .sum()
    };
    let grads = tape.backward_seeded(out, seed.clone())?;
    let base_sig = tape.kink_signature();
    let analytic: Vec<Tensor<T>> = ids.iter().map(|&id| grads.wrt(id)).collect();

    let h = T::lit(cfg.step);
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for (which, input) in inputs.iter().enumerate() {
        for k in 0..input.len() {
            let orig = input.data()[k];
            work[which].data_mut()[k] = orig + h;
            let (tp, _, op) = eval(&work)?;
            work[which].data_mut()[k] = orig - h;
            let (tm, _, om) = eval(&work)?;
            work[which].data_mut()[k] = orig;

            if tp.kink_signature() != base_sig || tm.kink_signature() != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (reduce(&tp, op) - reduce(&tm, om)) / (2.0 * cfg.step);
            let a = analytic[which].data()[k].as_f64();
            let denom = a.abs().max(numeric.abs()).max(cfg.denom_floor);
            let rel = (a - numeric).abs() / denom;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// 1 for a scalar output; otherwise weights in `[0.5, 1.5)`.
fn seed_weight(k: usize) -> f64 {
    if k == 0 {
        1.0
    } else {
        0.5 + ((k * 7919) % 97) as f64 / 97.0
    }
}

/// Result of one entry of [`op_suite`].
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self, tol: f64) -> bool {
        self.report.checked > 0 && self.report.max_rel_error < tol
    }
}

/// Deterministic test values in `[-1.5, 1.5]` kept away from zero, so relu
/// and max-pool kinks are rarely hit.
fn probe_tensor<T: Scalar>(rows: usize, cols: usize, salt: usize) -> Tensor<T> {
    let data = (0..rows * cols)
        .map(|k| {
            let u = (((k + 1) * 2654435761 + salt * 40503) % 10007) as f64 / 10007.0;
            let v = 0.2 + 1.3 * u;
            T::lit(if (k + salt) % 3 == 1 { -v } else { v })
        })
        .collect();
    Tensor::from_vec(rows, cols, data).expect("shape")
}

/// Checks every differentiable op in isolation, then the composite network
/// with its loss on `arch`. `fault` arms the wrong-gradient hook on every
/// tape built by the suite.
pub fn op_suite(arch: &ArchConfig, fault: Option<OpKind>, cfg: &GradCheckConfig) -> Result<Vec<SuiteEntry>> {
    let arm = |tape: &mut Tape<f64>| {
        if let Some(k) = fault {
            tape.inject_fault(k);
        }
    };
    let mut out = Vec::new();
    for kind in OpKind::DIFFERENTIABLE {
        let report = match kind {
            OpKind::Linear => grad_check(
                |t, ids| {
                    arm(t);
                    t.linear(ids[0], ids[1], ids[2])
                },
                &[probe_tensor(3, 4, 1), probe_tensor(4, 2, 2), probe_tensor(1, 2, 3)],
                cfg,
            ),
            OpKind::Relu => grad_check(
                |t, ids| {
                    arm(t);
                    Ok(t.relu(ids[0]))
                },
                &[probe_tensor(3, 4, 4)],
                cfg,
            ),
            OpKind::ConcatCols => grad_check(
                |t, ids| {
                    arm(t);
                    t.concat_cols(ids[0], ids[1])
                },
                &[probe_tensor(3, 2, 5), probe_tensor(3, 3, 6)],
                cfg,
            ),
            OpKind::SliceCols => grad_check(
                |t, ids| {
                    arm(t);
                    t.slice_cols(ids[0], 1, 4)
                },
                &[probe_tensor(3, 5, 7)],
                cfg,
            ),
            OpKind::MaxPoolRows => grad_check(
                |t, ids| {
                    arm(t);
                    t.maxpool_rows(ids[0])
                },
                &[probe_tensor(4, 3, 8)],
                cfg,
            ),
            OpKind::GroupMaxPool => grad_check(
                |t, ids| {
                    arm(t);
                    t.group_maxpool(ids[0], &[0, 1, 0, 1, 1], 2)
                },
                &[probe_tensor(5, 3, 9)],
                cfg,
            ),
            OpKind::GatherRows => grad_check(
                |t, ids| {
                    arm(t);
                    t.gather_rows(ids[0], &[1, 0, 1, 2])
                },
                &[probe_tensor(3, 2, 10)],
                cfg,
            ),
            OpKind::SoftmaxCrossEntropy => grad_check(
                |t, ids| {
                    arm(t);
                    t.softmax_cross_entropy(ids[0], &[2, 0, 4], &[true, false, true])
                },
                &[probe_tensor(3, 5, 11)],
                cfg,
            ),
            OpKind::SmoothL1 => {
                // Residuals on both sides of the quadratic/linear transition.
                let target = Tensor::from_rows(&[[0.1, -2.0], [1.9, 0.3], [-0.2, 0.4]]);
                grad_check(
                    |t, ids| {
                        arm(t);
                        t.smooth_l1(ids[0], &target, &[true, true, true, false, true, true])
                    },
                    &[probe_tensor(3, 2, 12)],
                    cfg,
                )
            }
            OpKind::Add => grad_check(
                |t, ids| {
                    arm(t);
                    t.add(ids[0], ids[1])
                },
                &[probe_tensor(2, 3, 13), probe_tensor(2, 3, 14)],
                cfg,
            ),
            OpKind::Scale => grad_check(
                |t, ids| {
                    arm(t);
                    Ok(t.scale(ids[0], -1.7))
                },
                &[probe_tensor(2, 3, 15)],
                cfg,
            ),
            OpKind::Leaf => unreachable!("leaves are not differentiable ops"),
        }?;
        out.push(SuiteEntry { name: kind.name(), report });
    }
    out.push(SuiteEntry {
        name: "network",
        report: network_check(arch, fault, cfg)?,
    });
    Ok(out)
}

/// Forward + combined loss on 3 points in 2 groups, checked with respect to
/// every parameter and both inputs.
fn network_check(arch: &ArchConfig, fault: Option<OpKind>, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let params = init_params::<f64>(arch, 11)?;
    let groups = [0usize, 1, 0];
    let mut inputs = vec![probe_tensor(3, arch.c_radar_in, 21), probe_tensor(3, arch.c_image_in, 22)];
    let paths = params.paths();
    for (i, path) in paths.iter().enumerate() {
        let base = params.get(path).expect("path from params");
        let jitter = probe_tensor::<f64>(base.rows(), base.cols(), 30 + i);
        let data = base.data().iter().zip(jitter.data()).map(|(w, j)| w + 0.2 * j).collect();
        inputs.push(Tensor::from_vec(base.rows(), base.cols(), data)?);
    }
    let n_r = arch.cls_out / 2;
    let targets: Vec<usize> = (0..3).map(|k| (k * 3 + 1) % n_r).collect();
    let reg_target = Tensor::from_vec(3, arch.reg_out, (0..3 * arch.reg_out).map(|k| 0.3 - 0.2 * k as f64).collect())?;
    grad_check(
        |t, ids| {
            if let Some(k) = fault {
                t.inject_fault(k);
            }
            let leaves: BTreeMap<String, NodeId> = paths.iter().cloned().zip(ids[2..].iter().copied()).collect();
            let (cls, reg) = forward_nodes(t, &leaves, arch, ids[0], ids[1], &groups)?;
            let ce = t.softmax_cross_entropy(cls, &targets, &[true; 3])?;
            let sl = t.smooth_l1(reg, &reg_target, &vec![true; 3 * arch.reg_out])?;
            let sl = t.scale(sl, 10.0);
            t.add(ce, sl)
        },
        &inputs,
        cfg,
    )
}
