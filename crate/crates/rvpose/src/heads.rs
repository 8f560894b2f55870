//! Output heads and the three stage losses.
//!
//! Stage 1 pairs summed cross-entropy over viewsphere classes with a
//! range-normalized position regression, combined through learned
//! homoscedastic uncertainty scalars. Stage 2 regresses the 6D attitude
//! representation and the position with L2 norms per time-step, same
//! uncertainty scheme with coefficient 2 on the regularizer. Stage 3
//! minimizes keypoint reprojection error through a differentiable
//! Gram-Schmidt map and pinhole projection, with a constant penalty for
//! keypoints that land at or behind the camera plane.

use crate::diffcore::checkpoint::ParamStore;
use crate::diffcore::graph::{Graph, GraphError, Param, ParamRef, Var};
use crate::diffcore::tensor::{Element, Tensor};
use crate::diffcore::Rng;
use crate::geometry::{norm3, project, CameraIntrinsics, Pose, Vec3, Z_MIN};

/// The two FC layers converting features into attitude and position values.
/// Stage 1 instantiates the attitude side with K_S² logits; Stages 2-3 with
/// the 6 values of the continuous rotation representation.
pub struct PoseHeads<E: Element> {
    att_w: ParamRef<E>,
    att_b: ParamRef<E>,
    pos_w: ParamRef<E>,
    pos_b: ParamRef<E>,
    pub att_dim: usize,
}

impl<E: Element> PoseHeads<E> {
    pub fn build(
        store: &mut ParamStore<E>,
        prefix: &str,
        feat_dim: usize,
        att_dim: usize,
        rng: &mut Rng,
    ) -> PoseHeads<E> {
        let std = (2.0 / feat_dim as f64).sqrt();
        PoseHeads {
            att_w: store.register(Param::new(
                format!("{prefix}.att.w"),
                Tensor::randn(&[feat_dim, att_dim], std, rng),
            )),
            att_b: store.register(Param::new(
                format!("{prefix}.att.b"),
                Tensor::zeros(&[att_dim]),
            )),
            pos_w: store.register(Param::new(
                format!("{prefix}.pos.w"),
                Tensor::randn(&[feat_dim, 3], std, rng),
            )),
            pos_b: store.register(Param::new(format!("{prefix}.pos.b"), Tensor::zeros(&[3]))),
            att_dim,
        }
    }

    /// features [N, D] -> (attitude [N, att_dim], position [N, 3]).
    pub fn forward(&self, g: &mut Graph<E>, features: Var) -> Result<(Var, Var), GraphError> {
        let aw = g.param(&self.att_w);
        let ab = g.param(&self.att_b);
        let att = g.linear(features, aw, ab)?;
        let pw = g.param(&self.pos_w);
        let pb = g.param(&self.pos_b);
        let pos = g.linear(features, pw, pb)?;
        Ok((att, pos))
    }
}

/// A pair of learned log-sigma scalars, initialized at 0.
pub fn build_sigma_pair<E: Element>(
    store: &mut ParamStore<E>,
    name_a: &str,
    name_b: &str,
) -> (ParamRef<E>, ParamRef<E>) {
    (
        store.register(Param::new(name_a, Tensor::scalar(E::zero()))),
        store.register(Param::new(name_b, Tensor::scalar(E::zero()))),
    )
}

/// Row-wise Euclidean norm of a 2D node: [N, D] -> [N, 1].
pub fn row_norm<E: Element>(g: &mut Graph<E>, x: Var) -> Result<Var, GraphError> {
    let sq = g.mul(x, x)?;
    let s = g.sum_axis(sq, 1)?;
    g.sqrt(s)
}

/// exp(-2 sigma) as a scalar node.
fn precision<E: Element>(g: &mut Graph<E>, sigma: Var) -> Result<Var, GraphError> {
    let s = g.scale(sigma, -2.0)?;
    g.exp(s)
}

/// Stage-1 combined loss:
/// ½·L_ce·exp(−2σ̂_a) + L_t·exp(−2σ̂_t) + σ̂_a + σ̂_t,
/// with L_ce the batch-summed cross entropy and L_t = Σ ‖t−t̂‖/‖t‖.
pub fn stage1_loss<E: Element>(
    g: &mut Graph<E>,
    logits: Var,
    onehot: &Tensor<E>,
    t_hat: Var,
    t_gt: &[Vec3],
    sigma_att: Var,
    sigma_pos: Var,
) -> Result<Var, GraphError> {
    let n = g.shape(t_hat)[0];
    if t_gt.len() != n {
        return Err(GraphError::Shape {
            op: "stage1_loss",
            detail: format!("{} ground-truth positions for batch {n}", t_gt.len()),
        });
    }
    let mut gt = Vec::with_capacity(n * 3);
    let mut inv_range = Vec::with_capacity(n);
    for t in t_gt {
        let range = norm3(t);
        if range <= 0.0 {
            return Err(GraphError::Numeric {
                op: "stage1_loss".to_string(),
                detail: "zero-range ground truth".to_string(),
            });
        }
        gt.extend(t.iter().map(|&v| E::from_f64(v)));
        inv_range.push(E::from_f64(1.0 / range));
    }
    let l_ce = g.softmax_cross_entropy(logits, onehot)?;

    let gt_v = g.input(Tensor::new(vec![n, 3], gt).unwrap());
    let diff = g.sub(t_hat, gt_v)?;
    let dist = row_norm(g, diff)?;
    let inv = g.input(Tensor::new(vec![n, 1], inv_range).unwrap());
    let rel = g.mul(dist, inv)?;
    let l_t = g.sum(rel)?;

    let w_att = precision(g, sigma_att)?;
    let w_pos = precision(g, sigma_pos)?;
    let ce_half = g.scale(l_ce, 0.5)?;
    let term_a = g.mul(ce_half, w_att)?;
    let term_t = g.mul(l_t, w_pos)?;
    let reg = g.add(sigma_att, sigma_pos)?;
    let partial = g.add(term_a, term_t)?;
    g.add(partial, reg)
}

/// Stage-2 combined loss over a window:
/// L_r·exp(−2σ̂_r) + L_t·exp(−2σ̂_t) + 2(σ̂_r + σ̂_t),
/// with L_r = Σ_κ Σ_b ‖r̂−r‖ and L_t likewise over positions.
pub fn stage2_loss<E: Element>(
    g: &mut Graph<E>,
    r_hats: &[Var],
    r_gts: &[Tensor<E>],
    t_hats: &[Var],
    t_gts: &[Tensor<E>],
    sigma_rot: Var,
    sigma_pos: Var,
) -> Result<Var, GraphError> {
    assert_eq!(r_hats.len(), r_gts.len());
    assert_eq!(t_hats.len(), t_gts.len());
    assert_eq!(r_hats.len(), t_hats.len());
    let mut l_r: Option<Var> = None;
    let mut l_t: Option<Var> = None;
    for k in 0..r_hats.len() {
        let r_gt = g.input(r_gts[k].clone());
        let rd = g.sub(r_hats[k], r_gt)?;
        let rn = row_norm(g, rd)?;
        let rs = g.sum(rn)?;
        l_r = Some(match l_r {
            None => rs,
            Some(acc) => g.add(acc, rs)?,
        });
        let t_gt = g.input(t_gts[k].clone());
        let td = g.sub(t_hats[k], t_gt)?;
        let tn = row_norm(g, td)?;
        let ts = g.sum(tn)?;
        l_t = Some(match l_t {
            None => ts,
            Some(acc) => g.add(acc, ts)?,
        });
    }
    let (l_r, l_t) = (l_r.expect("nonempty window"), l_t.expect("nonempty window"));
    let w_r = precision(g, sigma_rot)?;
    let w_t = precision(g, sigma_pos)?;
    let term_r = g.mul(l_r, w_r)?;
    let term_t = g.mul(l_t, w_t)?;
    let reg0 = g.add(sigma_rot, sigma_pos)?;
    let reg = g.scale(reg0, 2.0)?;
    let partial = g.add(term_r, term_t)?;
    g.add(partial, reg)
}

/// Closed-form stationary sigma for a frozen Stage-1 position loss
/// (term L·exp(−2σ̂) + σ̂).
pub fn sigma_star_stage1(loss: f64) -> f64 {
    0.5 * (2.0 * loss).ln()
}

/// Closed-form stationary sigma for a frozen Stage-2 task loss
/// (term L·exp(−2σ̂) + 2σ̂).
pub fn sigma_star_stage2(loss: f64) -> f64 {
    0.5 * loss.ln()
}

/// Constant penalty charged per keypoint whose predicted depth is at or
/// behind the camera plane: the image diagonal in pixels, gradient-free.
pub fn behind_camera_penalty(count: usize, width: usize, height: usize) -> f64 {
    let diag = ((width * width + height * height) as f64).sqrt();
    count as f64 * diag
}

/// Diagnostics from one stage-3 loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Stage3Stats {
    /// Keypoint terms replaced by the behind-camera penalty.
    pub penalized_keypoints: usize,
    /// Samples whose 6D output failed Gram-Schmidt and were fully penalized.
    pub degenerate_samples: usize,
}

/// Differentiable Gram-Schmidt: r [B, 6] -> the three rotation columns
/// (b1, b2, b3), each [B, 3]. `valid` masks rows; invalid rows get safe
/// denominators and contribute nothing downstream.
fn gram_schmidt_columns<E: Element>(
    g: &mut Graph<E>,
    r: Var,
    valid: &[bool],
) -> Result<(Var, Var, Var), GraphError> {
    let b = g.shape(r)[0];
    let mask: Vec<E> = valid
        .iter()
        .map(|&v| if v { E::one() } else { E::zero() })
        .collect();
    let inv_mask: Vec<E> = valid
        .iter()
        .map(|&v| if v { E::zero() } else { E::one() })
        .collect();
    let mask_col = g.input(Tensor::new(vec![b, 1], mask).unwrap());
    let inv_col = g.input(Tensor::new(vec![b, 1], inv_mask).unwrap());

    // denominator d -> d·mask + (1-mask): invalid rows divide by 1
    let safe = |g: &mut Graph<E>, d: Var| -> Result<Var, GraphError> {
        let m = g.mul(d, mask_col)?;
        g.add(m, inv_col)
    };

    let a1 = g.slice(r, 1, 0, 3)?;
    let a2 = g.slice(r, 1, 3, 3)?;
    let n1 = row_norm(g, a1)?;
    let n1s = safe(g, n1)?;
    let n1r = g.repeat_last(n1s, 3)?;
    let b1 = g.div(a1, n1r)?;

    let prod = g.mul(b1, a2)?;
    let dot = g.sum_axis(prod, 1)?;
    let dot3 = g.repeat_last(dot, 3)?;
    let proj = g.mul(dot3, b1)?;
    let u2 = g.sub(a2, proj)?;
    let n2 = row_norm(g, u2)?;
    let n2s = safe(g, n2)?;
    let n2r = g.repeat_last(n2s, 3)?;
    let b2 = g.div(u2, n2r)?;

    let b3 = cross_rows(g, b1, b2)?;
    Ok((b1, b2, b3))
}

/// Row-wise cross product of [B, 3] nodes.
fn cross_rows<E: Element>(g: &mut Graph<E>, a: Var, b: Var) -> Result<Var, GraphError> {
    let ax = g.slice(a, 1, 0, 1)?;
    let ay = g.slice(a, 1, 1, 1)?;
    let az = g.slice(a, 1, 2, 1)?;
    let bx = g.slice(b, 1, 0, 1)?;
    let by = g.slice(b, 1, 1, 1)?;
    let bz = g.slice(b, 1, 2, 1)?;
    let t1 = g.mul(ay, bz)?;
    let t2 = g.mul(az, by)?;
    let cx = g.sub(t1, t2)?;
    let t3 = g.mul(az, bx)?;
    let t4 = g.mul(ax, bz)?;
    let cy = g.sub(t3, t4)?;
    let t5 = g.mul(ax, by)?;
    let t6 = g.mul(ay, bx)?;
    let cz = g.sub(t5, t6)?;
    g.concat(&[cx, cy, cz], 1)
}

/// Degeneracy screen applied to the forward values before graph
/// construction: first column norm and residual second column must clear
/// the Gram-Schmidt tolerance.
fn screen_sixd<E: Element>(values: &Tensor<E>) -> Vec<bool> {
    let b = values.shape()[0];
    let d = values.data();
    (0..b)
        .map(|i| {
            let r = &d[i * 6..(i + 1) * 6];
            let a1 = [r[0].as_f64(), r[1].as_f64(), r[2].as_f64()];
            let a2 = [r[3].as_f64(), r[4].as_f64(), r[5].as_f64()];
            let n1 = norm3(&a1);
            if n1 <= 1e-9 {
                return false;
            }
            let b1 = crate::geometry::scale3(&a1, 1.0 / n1);
            let dot = crate::geometry::dot3(&b1, &a2);
            let u2 = crate::geometry::sub3(&a2, &crate::geometry::scale3(&b1, dot));
            norm3(&u2) > 1e-9
        })
        .collect()
}

/// Stage-3 reprojection loss over a window: Σ_κ Σ_i ‖z_gt − π(K, T̂, p_i)‖,
/// assembled from sixd_to_rotation(r̂) and t̂, fully differentiable through
/// Gram-Schmidt and the projection. Keypoints whose predicted depth is at or
/// behind the plane, and all keypoints of samples with degenerate r̂, are
/// charged the constant behind-camera penalty instead.
///
/// Every ground-truth projection must exist (targets in front of the
/// camera); that is the caller's contract and a hard error here.
#[allow(clippy::too_many_arguments)]
pub fn stage3_loss<E: Element>(
    g: &mut Graph<E>,
    r_hats: &[Var],
    t_hats: &[Var],
    poses_gt: &[Vec<Pose>],
    k: &CameraIntrinsics,
    keypoints: &[Vec3],
    width: usize,
    height: usize,
) -> Result<(Var, Stage3Stats), GraphError> {
    assert_eq!(r_hats.len(), t_hats.len());
    assert_eq!(r_hats.len(), poses_gt.len());
    let mut stats = Stage3Stats::default();
    let mut total: Option<Var> = None;
    let mut penalty_count = 0usize;

    for (kappa, (&r_hat, &t_hat)) in r_hats.iter().zip(t_hats).enumerate() {
        let b = g.shape(r_hat)[0];
        assert_eq!(poses_gt[kappa].len(), b, "ground-truth poses per sample");
        let valid = screen_sixd(g.value(r_hat));
        let degenerate = valid.iter().filter(|&&v| !v).count();
        stats.degenerate_samples += degenerate;
        penalty_count += degenerate * keypoints.len();
        let (b1, b2, b3) = gram_schmidt_columns(g, r_hat, &valid)?;

        for p in keypoints {
            // camera-frame keypoint: b1·px + b2·py + b3·pz + t̂
            let c1 = g.scale(b1, p[0])?;
            let c2 = g.scale(b2, p[1])?;
            let c3 = g.scale(b3, p[2])?;
            let s12 = g.add(c1, c2)?;
            let s123 = g.add(s12, c3)?;
            let cam = g.add(s123, t_hat)?;

            // per-sample keypoint mask from the forward values
            let cam_vals = g.value(cam).data().to_vec();
            let mut m = Vec::with_capacity(b);
            for (i, &ok) in valid.iter().enumerate() {
                let z = cam_vals[i * 3 + 2].as_f64();
                let include = ok && z > Z_MIN;
                if !include && ok {
                    penalty_count += 1;
                    stats.penalized_keypoints += 1;
                }
                m.push(include);
            }
            let mask: Vec<E> = m
                .iter()
                .map(|&v| if v { E::one() } else { E::zero() })
                .collect();
            let inv: Vec<E> = m
                .iter()
                .map(|&v| if v { E::zero() } else { E::one() })
                .collect();
            let mask_col = g.input(Tensor::new(vec![b, 1], mask).unwrap());
            let inv_col = g.input(Tensor::new(vec![b, 1], inv).unwrap());

            let x = g.slice(cam, 1, 0, 1)?;
            let y = g.slice(cam, 1, 1, 1)?;
            let z = g.slice(cam, 1, 2, 1)?;
            // masked-out rows divide by 1 instead of a tiny/negative depth
            let zm = g.mul(z, mask_col)?;
            let z_safe = g.add(zm, inv_col)?;

            let xu = g.div(x, z_safe)?;
            let yu = g.div(y, z_safe)?;
            let fxu = g.scale(xu, k.fx)?;
            let fyv = g.scale(yu, k.fy)?;
            let cx = g.input(Tensor::full(&[b, 1], E::from_f64(k.cx)));
            let cy = g.input(Tensor::full(&[b, 1], E::from_f64(k.cy)));
            let u = g.add(fxu, cx)?;
            let v = g.add(fyv, cy)?;
            let uv = g.concat(&[u, v], 1)?;

            // ground-truth projections, which must exist
            let mut gt = Vec::with_capacity(b * 2);
            for pose in &poses_gt[kappa] {
                let z_gt = project(k, pose, p).ok_or_else(|| GraphError::Numeric {
                    op: "stage3_loss".to_string(),
                    detail: "ground-truth keypoint behind camera".to_string(),
                })?;
                gt.push(E::from_f64(z_gt[0]));
                gt.push(E::from_f64(z_gt[1]));
            }
            let gt_v = g.input(Tensor::new(vec![b, 2], gt).unwrap());
            let res = g.sub(uv, gt_v)?;
            let rn = row_norm(g, res)?;
            let masked = g.mul(rn, mask_col)?;
            let term = g.sum(masked)?;
            total = Some(match total {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
        }
    }
    let mut loss = total.expect("nonempty window and keypoint set");
    if penalty_count > 0 {
        let pen = behind_camera_penalty(penalty_count, width, height);
        let pen_v = g.input(Tensor::scalar(E::from_f64(pen)));
        loss = g.add(loss, pen_v)?;
    }
    Ok((loss, stats))
}
