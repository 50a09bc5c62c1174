//! Forward passes of the two-view network and the aggregated multi-view
//! network, including construction of the refinement guidance inputs.

use std::sync::Arc;

use ndarray::{Array2, Array3, Array4, ArrayD, Axis, Ix2, IxDyn};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, DisparityHypotheses, PixelProjector, RescalePlane};
use crate::maps::DisparityMap;
use crate::nn::Binding;
use crate::scalar::Scalar;
use crate::sweep::{project_map, rescale_disparity, SweepCoords};
use crate::volumes;

use super::{MvsModel, RefinementKind};

/// Downsampling factor of the feature extractor.
pub const FEATURE_SCALE: usize = 4;

/// One input view: an RGB image in [0, 1] with its camera.
#[derive(Debug, Clone)]
pub struct ViewInput<T> {
    pub image: Array3<T>,
    pub camera: CameraModel<T>,
}

/// Branch execution strategy for the multi-view forward pass. Parallel
/// execution runs each branch on its own tape and re-inserts the results as
/// constants, so it is only available for inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchExec {
    Sequential,
    Parallel,
}

pub struct TwoViewOutput {
    /// Initial reference disparity at feature resolution.
    pub d_ref: NodeId,
    /// Initial source disparity from the reverse pass of the shared network.
    pub d_src: NodeId,
    /// Filtered reference cost volume.
    pub c_tilde: NodeId,
    /// Refined cost volume, absent when refinement is disabled.
    pub c_refined: Option<NodeId>,
    /// Final disparity map (refined, or initial without refinement).
    pub d_refined: NodeId,
    pub prob_refined: NodeId,
    /// Disparity maps of the intermediate regularization stacks.
    pub intermediates: Vec<NodeId>,
    pub f_low_ref: NodeId,
    pub f_low_src: NodeId,
}

pub struct MultiViewOutput {
    pub d_final: NodeId,
    pub prob_final: NodeId,
    /// Initial reference disparity; one shared map when the first
    /// aggregation point is enabled, one per branch otherwise.
    pub d_ref_initial: Vec<NodeId>,
    pub d_sources: Vec<NodeId>,
}

/// Zero-pad an image on the bottom/right to a multiple of `m`.
pub fn pad_to_multiple<T: Scalar>(image: &Array3<T>, m: usize) -> Array3<T> {
    let (c, h, w) = image.dim();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return image.clone();
    }
    let mut out = Array3::zeros((c, ph, pw));
    out.slice_mut(ndarray::s![.., ..h, ..w]).assign(image);
    out
}

fn image_constant<T: Scalar>(tape: &mut Tape<T>, image: &Array3<T>) -> NodeId {
    let padded = pad_to_multiple(image, FEATURE_SCALE);
    tape.constant(padded.into_dyn())
}

fn node_disparity_map<T: Scalar>(tape: &Tape<T>, node: NodeId) -> DisparityMap<T> {
    let arr: Array2<T> = tape
        .value(node)
        .clone()
        .into_dimensionality::<Ix2>()
        .expect("disparity node must be 2-D");
    DisparityMap::dense(arr)
}

/// Warped-and-concatenated matching cost volume for one view direction.
fn matching_volume<T: Scalar>(
    tape: &mut Tape<T>,
    f_ref: NodeId,
    f_src: NodeId,
    cam_ref: &CameraModel<T>,
    cam_src: &CameraModel<T>,
    planes: &DisparityHypotheses<T>,
) -> NodeId {
    let coords = Arc::new(SweepCoords::new(cam_ref, cam_src, planes));
    let warped = tape.plane_sweep(f_src, coords);
    let tiled = tape.tile_depth(f_ref, planes.count());
    tape.concat(&[tiled, warped], 0)
}

struct BranchNodes {
    c_tilde_ref: NodeId,
    inters_ref: Vec<NodeId>,
    d_src: NodeId,
    f_low_src: NodeId,
}

/// One two-view branch: features of the source image, the matching volume in
/// both directions through the shared regularizer, and the initial source
/// disparity.
fn branch_forward<T: Scalar>(
    model: &MvsModel<T>,
    tape: &mut Tape<T>,
    bind: &Binding,
    fh_ref: NodeId,
    source: &ViewInput<T>,
    ref_cam4: &CameraModel<T>,
    planes: &DisparityHypotheses<T>,
) -> BranchNodes {
    let src_img = image_constant(tape, &source.image);
    let (fh_src, fl_src) = model.fem.apply(tape, bind, src_img);
    let src_cam4 = source.camera.rescaled(FEATURE_SCALE);
    let cost_ref = matching_volume(tape, fh_ref, fh_src, ref_cam4, &src_cam4, planes);
    let (c_tilde_ref, inters_ref) = model.crm.apply(tape, bind, cost_ref);
    let cost_src = matching_volume(tape, fh_src, fh_ref, &src_cam4, ref_cam4, planes);
    let (c_tilde_src, _) = model.crm.apply(tape, bind, cost_src);
    let (_, d_src) = model.output.apply(tape, bind, c_tilde_src, planes);
    BranchNodes {
        c_tilde_ref,
        inters_ref,
        d_src,
        f_low_src: fl_src,
    }
}

/// Everything one branch's guidance construction needs.
struct GuidanceCtx<'a, T: Scalar> {
    d_ref: NodeId,
    d_src: NodeId,
    fl_ref: NodeId,
    fl_src: NodeId,
    ref_cam4: &'a CameraModel<T>,
    src_cam4: &'a CameraModel<T>,
    planes: &'a DisparityHypotheses<T>,
    hull: Option<NodeId>,
}

/// Builds the guidance volumes in refinement input order: photometric
/// volume, geometric volume, tiled photometric error, tiled geometric error,
/// visual hull. The geometric terms are constants by default; the
/// photometric error keeps gradients into the features and (through the
/// sampling coordinates) into the reference disparity.
fn guidance_volumes<T: Scalar>(
    model: &MvsModel<T>,
    tape: &mut Tape<T>,
    ctx: &GuidanceCtx<'_, T>,
) -> Vec<NodeId> {
    let kind = model.cfg.refinement;
    let planes = ctx.planes;
    let d = planes.count();
    let mut out = Vec::new();

    // Photometric cost volume: low-level features in both frustums.
    let coords_const = Arc::new(SweepCoords::new(ctx.ref_cam4, ctx.src_cam4, planes));
    let warped_low = tape.plane_sweep(ctx.fl_src, coords_const);
    let tiled_low = tape.tile_depth(ctx.fl_ref, d);
    out.push(tape.concat(&[tiled_low, warped_low], 0));

    // Pure-path correspondence from the current disparity values; also the
    // source of the validity masks used on the differentiable path.
    let d_ref_map = node_disparity_map(tape, ctx.d_ref);
    let d_src_map = node_disparity_map(tape, ctx.d_src);
    let (h, w) = d_ref_map.dim();
    let corr = project_map(&d_ref_map, ctx.ref_cam4, ctx.src_cam4);
    let transferred = rescale_disparity(&d_src_map, ctx.ref_cam4, ctx.src_cam4, &corr)
        .expect("guidance maps share the branch geometry");

    let geo = if kind == RefinementKind::NoHull || kind == RefinementKind::Full {
        if model.cfg.detach_geometric_guidance {
            let vg_ref = volumes::geometric_cost_ref(&d_ref_map, planes);
            let vg_src = volumes::geometric_cost_source(
                &d_ref_map,
                &d_src_map,
                planes,
                ctx.ref_cam4,
                ctx.src_cam4,
            )
            .expect("guidance maps share the branch geometry");
            let mut vg = Array4::zeros((2, d, h, w));
            vg.index_axis_mut(Axis(0), 0)
                .assign(&vg_ref.data.index_axis(Axis(0), 0));
            vg.index_axis_mut(Axis(0), 1)
                .assign(&vg_src.data.index_axis(Axis(0), 0));
            let vg_node = tape.constant(vg.into_dyn());

            let e_g = volumes::geometric_error_at(
                &d_ref_map,
                &d_src_map,
                ctx.ref_cam4,
                ctx.src_cam4,
                &corr,
            )
            .expect("guidance maps share the branch geometry");
            let eg_node = tape.constant(e_g.data.into_dyn());
            let eg_tiled = tape.tile_depth(eg_node, d);
            Some((vg_node, eg_tiled))
        } else {
            Some(geometric_guidance_on_tape(
                tape,
                ctx,
                &transferred.mask,
                h,
                w,
            ))
        }
    } else {
        None
    };
    if let Some((vg, _)) = &geo {
        out.push(*vg);
    }

    // Photometric error with differentiable sampling coordinates.
    let proj = Arc::new(PixelProjector::new(ctx.ref_cam4, ctx.src_cam4));
    let coords_node = tape.project_coords(ctx.d_ref, proj);
    let sampled = tape.sample_feat_at(ctx.fl_src, coords_node);
    let diff = tape.sub(sampled, ctx.fl_ref);
    let abs = tape.abs(diff);
    // The mask mirrors the pure photometric error: pixels without a valid
    // projection read zero; out-of-bounds taps already sample zero.
    let low_ch = tape.value(ctx.fl_ref).shape()[0];
    let mut mask3 = Array3::<T>::zeros((low_ch, h, w));
    for y in 0..h {
        for x in 0..w {
            if corr.valid[[y, x]] {
                for ch in 0..low_ch {
                    mask3[[ch, y, x]] = T::one();
                }
            }
        }
    }
    let masked = tape.mul_const(abs, Arc::new(mask3.into_dyn()));
    out.push(tape.tile_depth(masked, d));

    if let Some((_, eg)) = geo {
        out.push(eg);
    }

    if kind == RefinementKind::Full {
        out.push(ctx.hull.expect("full refinement requires the visual hull"));
    }
    out
}

/// Differentiable construction of the geometric guidance terms, used when
/// the stop-gradient of the geometric inputs is disabled.
fn geometric_guidance_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    ctx: &GuidanceCtx<'_, T>,
    transfer_mask: &Array2<bool>,
    h: usize,
    w: usize,
) -> (NodeId, NodeId) {
    let planes = ctx.planes;
    let d = planes.count();
    let sentinel = planes.range();

    let proj = Arc::new(PixelProjector::new(ctx.ref_cam4, ctx.src_cam4));
    let coords = tape.project_coords(ctx.d_ref, proj);
    let plane = RescalePlane::new(ctx.ref_cam4, ctx.src_cam4);
    let dstar = tape.rescale_sample(ctx.d_src, coords, &plane);

    let mask2: Array2<T> = transfer_mask.map(|&m| if m { T::one() } else { T::zero() });

    // Geometric error, masked to valid transfers.
    let eg_raw = tape.sub(dstar, ctx.d_ref);
    let eg_abs = tape.abs(eg_raw);
    let eg_masked = tape.mul_const(eg_abs, Arc::new(mask2.clone().into_dyn()));
    let eg3 = tape.reshape(eg_masked, &[1, h, w]);
    let eg_tiled = tape.tile_depth(eg3, d);

    // Plane offsets as a broadcast constant [1, D, H, W].
    let mut neg_planes = Array4::<T>::zeros((1, d, h, w));
    for i in 0..d {
        neg_planes
            .index_axis_mut(Axis(1), i)
            .mapv_inplace(|_| -planes.disparity(i));
    }
    let neg_planes = neg_planes.into_dyn();

    // Reference geometric cost |d_ref - d_i|.
    let r3 = tape.reshape(ctx.d_ref, &[1, h, w]);
    let r4 = tape.tile_depth(r3, d);
    let rdiff = tape.add_const(r4, &neg_planes);
    let vg_ref = tape.abs(rdiff);

    // Source geometric cost |d*_src - d_i| with the sentinel where the
    // transfer is invalid.
    let s3 = tape.reshape(dstar, &[1, h, w]);
    let s4 = tape.tile_depth(s3, d);
    let sdiff = tape.add_const(s4, &neg_planes);
    let vg_src_raw = tape.abs(sdiff);
    let mut mask4 = Array4::<T>::zeros((1, d, h, w));
    let mut fill4 = Array4::<T>::zeros((1, d, h, w));
    for i in 0..d {
        for y in 0..h {
            for x in 0..w {
                if transfer_mask[[y, x]] {
                    mask4[[0, i, y, x]] = T::one();
                } else {
                    fill4[[0, i, y, x]] = sentinel;
                }
            }
        }
    }
    let vg_src_masked = tape.mul_const(vg_src_raw, Arc::new(mask4.into_dyn()));
    let vg_src = tape.add_const(vg_src_masked, &fill4.into_dyn());

    let vg = tape.concat(&[vg_ref, vg_src], 0);
    (vg, eg_tiled)
}

/// Visual hull over the reference frustum as a constant [1, D, H, W] node.
fn hull_constant<T: Scalar>(
    tape: &mut Tape<T>,
    views: &[(DisparityMap<T>, CameraModel<T>)],
    planes: &DisparityHypotheses<T>,
    ref_cam4: &CameraModel<T>,
) -> NodeId {
    let hull = volumes::visual_hull(views, planes, ref_cam4).expect("hull views are non-empty");
    let arr: ArrayD<T> = hull.data.insert_axis(Axis(0)).into_dyn();
    tape.constant(arr)
}

/// Full two-view pass: shared features, matching volumes in both
/// directions, regularization, and geometric-photometric refinement of the
/// reference volume.
pub fn two_view_forward<T: Scalar>(
    model: &MvsModel<T>,
    tape: &mut Tape<T>,
    bind: &Binding,
    reference: &ViewInput<T>,
    source: &ViewInput<T>,
    planes: &DisparityHypotheses<T>,
) -> Result<TwoViewOutput> {
    let ref_img = image_constant(tape, &reference.image);
    let (fh_ref, fl_ref) = model.fem.apply(tape, bind, ref_img);
    let ref_cam4 = reference.camera.rescaled(FEATURE_SCALE);
    let branch = branch_forward(model, tape, bind, fh_ref, source, &ref_cam4, planes);
    let (p_ref, d_ref) = model.output.apply(tape, bind, branch.c_tilde_ref, planes);
    let intermediates: Vec<NodeId> = branch
        .inters_ref
        .iter()
        .map(|&v| model.output.apply(tape, bind, v, planes).1)
        .collect();

    if model.cfg.refinement == RefinementKind::None {
        return Ok(TwoViewOutput {
            d_ref,
            d_src: branch.d_src,
            c_tilde: branch.c_tilde_ref,
            c_refined: None,
            d_refined: d_ref,
            prob_refined: p_ref,
            intermediates,
            f_low_ref: fl_ref,
            f_low_src: branch.f_low_src,
        });
    }

    let src_cam4 = source.camera.rescaled(FEATURE_SCALE);
    let hull = if model.cfg.refinement == RefinementKind::Full {
        let views = vec![
            (node_disparity_map(tape, d_ref), ref_cam4.clone()),
            (node_disparity_map(tape, branch.d_src), src_cam4.clone()),
        ];
        Some(hull_constant(tape, &views, planes, &ref_cam4))
    } else {
        None
    };
    let ctx = GuidanceCtx {
        d_ref,
        d_src: branch.d_src,
        fl_ref,
        fl_src: branch.f_low_src,
        ref_cam4: &ref_cam4,
        src_cam4: &src_cam4,
        planes,
        hull,
    };
    let guidance = guidance_volumes(model, tape, &ctx);
    let refine = model.refine.as_ref().expect("refinement net present");
    let c_refined = refine.apply(tape, bind, branch.c_tilde_ref, &guidance);
    let (prob_refined, d_refined) = model.output.apply(tape, bind, c_refined, planes);
    Ok(TwoViewOutput {
        d_ref,
        d_src: branch.d_src,
        c_tilde: branch.c_tilde_ref,
        c_refined: Some(c_refined),
        d_refined,
        prob_refined,
        intermediates,
        f_low_ref: fl_ref,
        f_low_src: branch.f_low_src,
    })
}

/// Aggregated multi-view pass: N shared two-view branches, fused after cost
/// regularization (when enabled) and again before the final output module.
pub fn multi_view_forward<T: Scalar>(
    model: &MvsModel<T>,
    tape: &mut Tape<T>,
    bind: &Binding,
    reference: &ViewInput<T>,
    sources: &[ViewInput<T>],
    planes: &DisparityHypotheses<T>,
    exec: BranchExec,
) -> Result<MultiViewOutput> {
    if sources.is_empty() {
        return Err(Error::invalid("multi-view forward needs at least one source"));
    }
    let ref_img = image_constant(tape, &reference.image);
    let (fh_ref, fl_ref) = model.fem.apply(tape, bind, ref_img);
    let ref_cam4 = reference.camera.rescaled(FEATURE_SCALE);

    let branches: Vec<BranchNodes> = match exec {
        BranchExec::Sequential => sources
            .iter()
            .map(|s| branch_forward(model, tape, bind, fh_ref, s, &ref_cam4, planes))
            .collect(),
        BranchExec::Parallel => {
            parallel_branches(model, tape, fh_ref, sources, &ref_cam4, planes)
        }
    };

    let src_cams4: Vec<CameraModel<T>> = sources
        .iter()
        .map(|s| s.camera.rescaled(FEATURE_SCALE))
        .collect();

    // First aggregation point: fuse the filtered reference volumes so every
    // branch refines a single shared estimate.
    let c_set: Vec<NodeId> = branches.iter().map(|b| b.c_tilde_ref).collect();
    let (branch_inputs, d_ref_initial): (Vec<NodeId>, Vec<NodeId>) =
        if let Some(agg1) = &model.agg1 {
            let fused = agg1.apply(tape, bind, &c_set)?;
            let (_, d_ref) = model.output.apply(tape, bind, fused, planes);
            (vec![fused; branches.len()], vec![d_ref])
        } else {
            let ds = c_set
                .iter()
                .map(|&c| model.output.apply(tape, bind, c, planes).1)
                .collect::<Vec<_>>();
            (c_set.clone(), ds)
        };

    let refined_set: Vec<NodeId> = if model.cfg.refinement == RefinementKind::None {
        branch_inputs.clone()
    } else {
        // With the shared estimate the hull over all N+1 maps is one
        // constant; otherwise each branch sees its own reference map.
        let shared_hull = if model.agg1.is_some() && model.cfg.refinement == RefinementKind::Full
        {
            let mut views = vec![(node_disparity_map(tape, d_ref_initial[0]), ref_cam4.clone())];
            for (b, cam) in branches.iter().zip(&src_cams4) {
                views.push((node_disparity_map(tape, b.d_src), cam.clone()));
            }
            Some(hull_constant(tape, &views, planes, &ref_cam4))
        } else {
            None
        };
        let refine = model.refine.as_ref().expect("refinement net present");
        branches
            .iter()
            .enumerate()
            .map(|(n, b)| {
                let d_ref_n = if model.agg1.is_some() {
                    d_ref_initial[0]
                } else {
                    d_ref_initial[n]
                };
                let hull = match (&shared_hull, model.cfg.refinement) {
                    (Some(h), _) => Some(*h),
                    (None, RefinementKind::Full) => {
                        let mut views =
                            vec![(node_disparity_map(tape, d_ref_n), ref_cam4.clone())];
                        for (bb, cam) in branches.iter().zip(&src_cams4) {
                            views.push((node_disparity_map(tape, bb.d_src), cam.clone()));
                        }
                        Some(hull_constant(tape, &views, planes, &ref_cam4))
                    }
                    _ => None,
                };
                let ctx = GuidanceCtx {
                    d_ref: d_ref_n,
                    d_src: b.d_src,
                    fl_ref,
                    fl_src: b.f_low_src,
                    ref_cam4: &ref_cam4,
                    src_cam4: &src_cams4[n],
                    planes,
                    hull,
                };
                let guidance = guidance_volumes(model, tape, &ctx);
                refine.apply(tape, bind, branch_inputs[n], &guidance)
            })
            .collect()
    };

    // Second aggregation point, right before the final output module.
    let fused_refined = model.agg2.apply(tape, bind, &refined_set)?;
    let (prob_final, d_final) = model.output.apply(tape, bind, fused_refined, planes);
    Ok(MultiViewOutput {
        d_final,
        prob_final,
        d_ref_initial,
        d_sources: branches.iter().map(|b| b.d_src).collect(),
    })
}

/// Runs the branches on worker threads with frozen parameters, returning
/// their outputs as constants on the main tape. Results are collected by
/// branch index, so the outcome does not depend on completion order.
fn parallel_branches<T: Scalar>(
    model: &MvsModel<T>,
    tape: &mut Tape<T>,
    fh_ref: NodeId,
    sources: &[ViewInput<T>],
    ref_cam4: &CameraModel<T>,
    planes: &DisparityHypotheses<T>,
) -> Vec<BranchNodes> {
    struct BranchValues<T> {
        c_tilde_ref: ArrayD<T>,
        inters_ref: Vec<ArrayD<T>>,
        d_src: ArrayD<T>,
        f_low_src: ArrayD<T>,
    }
    let fh_ref_val = tape.value(fh_ref).clone();
    let results: Vec<BranchValues<T>> = std::thread::scope(|scope| {
        let handles: Vec<_> = sources
            .iter()
            .map(|src| {
                let fh = fh_ref_val.clone();
                scope.spawn(move || {
                    let mut local = Tape::new();
                    let local_bind = model.params.bind_frozen(&mut local);
                    let fh_node = local.constant(fh);
                    let b = branch_forward(
                        model,
                        &mut local,
                        &local_bind,
                        fh_node,
                        src,
                        ref_cam4,
                        planes,
                    );
                    BranchValues {
                        c_tilde_ref: local.value(b.c_tilde_ref).clone(),
                        inters_ref: b
                            .inters_ref
                            .iter()
                            .map(|&v| local.value(v).clone())
                            .collect(),
                        d_src: local.value(b.d_src).clone(),
                        f_low_src: local.value(b.f_low_src).clone(),
                    }
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("branch thread panicked"))
            .collect()
    });
    results
        .into_iter()
        .map(|v| BranchNodes {
            c_tilde_ref: tape.constant(v.c_tilde_ref),
            inters_ref: v.inters_ref.into_iter().map(|a| tape.constant(a)).collect(),
            d_src: tape.constant(v.d_src),
            f_low_src: tape.constant(v.f_low_src),
        })
        .collect()
}

/// Converts an 8-bit RGB image to the [0, 1] float layout the networks eat.
pub fn image_to_float<T: Scalar>(rgb: &Array3<u8>) -> Array3<T> {
    let scale = T::of(1.0 / 255.0);
    rgb.map(|&v| T::of_usize(v as usize) * scale)
}

#[allow(unused)]
fn shape_of<T: Scalar>(tape: &Tape<T>, n: NodeId) -> IxDyn {
    tape.value(n).raw_dim()
}
