use flowreg::flow::{face_mask, integrate_field, FlowConfig, Scheme};
use flowreg::io::{encode_pgm, parse_pgm, Pgm};
use flowreg::metrics::{dice, neg_jacobian_ratio};
use flowreg::objective::{loss_jdet, loss_smt, mse, ncc};
use flowreg::{
    jacobian_det_map, make_identity_grid, spatial_gradient, warp, warp_labels, GaussianKernel, Image, LabelMap,
    NeuralFieldSpec, Shape, TimeMode, VelocityModel, VoxelCloud,
};
use proptest::prelude::*;

fn shape2() -> impl Strategy<Value = Shape> {
    (3usize..10, 3usize..10).prop_map(|(h, w)| Shape::new(&[h, w]).unwrap())
}

fn shape_any() -> impl Strategy<Value = Shape> {
    prop_oneof![
        shape2(),
        (3usize..6, 3usize..6, 3usize..6).prop_map(|(a, b, c)| Shape::new(&[a, b, c]).unwrap()),
    ]
}

fn values(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, n)
}

fn image(shape: Shape) -> impl Strategy<Value = Image> {
    values(shape.len(), -2.0, 2.0).prop_map(move |v| Image::new(shape.clone(), v).unwrap())
}

/// Identity plus a bounded random displacement.
fn cloud(shape: Shape, amp: f64) -> impl Strategy<Value = VoxelCloud> {
    let n = shape.ndim() * shape.len();
    values(n, -amp, amp).prop_map(move |d| {
        let id = make_identity_grid(&shape);
        VoxelCloud::new(shape.clone(), id.coords().iter().zip(&d).map(|(a, b)| a + b).collect()).unwrap()
    })
}

fn image_and_cloud() -> impl Strategy<Value = (Image, Image, VoxelCloud)> {
    shape_any().prop_flat_map(|s| (image(s.clone()), image(s.clone()), cloud(s, 3.0)))
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

/// Swaps the two axes of a 2D image.
fn transpose_image(img: &Image) -> Image {
    let e = img.shape().extents();
    let (h, w) = (e[0], e[1]);
    Image::from_fn(Shape::new(&[w, h]).unwrap(), |p| img.values()[p[1] * w + p[0]]).unwrap()
}

/// Swaps both the lattice axes and the coordinate components of a 2D cloud.
fn transpose_cloud(c: &VoxelCloud) -> VoxelCloud {
    let e = c.shape().extents();
    let (h, w) = (e[0], e[1]);
    let n = h * w;
    let mut out = vec![0.0; 2 * n];
    for y in 0..w {
        for x in 0..h {
            let src = x * w + y;
            out[y * h + x] = c.component(1)[src];
            out[n + y * h + x] = c.component(0)[src];
        }
    }
    VoxelCloud::new(Shape::new(&[w, h]).unwrap(), out).unwrap()
}

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig { cases, failure_persistence: None, ..ProptestConfig::default() }
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn warp_is_linear_in_intensities((a, b, q) in image_and_cloud(), s in -3.0f64..3.0, t in -3.0f64..3.0) {
        let mix = Image::new(a.shape().clone(), a.values().iter().zip(b.values()).map(|(x, y)| s * x + t * y).collect()).unwrap();
        let lhs = warp(&mix, &q).unwrap();
        let (wa, wb) = (warp(&a, &q).unwrap(), warp(&b, &q).unwrap());
        let rhs: Vec<f64> = wa.values().iter().zip(wb.values()).map(|(x, y)| s * x + t * y).collect();
        prop_assert!(close(lhs.values(), &rhs, 1e-12));
    }

    #[test]
    fn identity_has_unit_determinant(s in shape_any()) {
        prop_assert!(jacobian_det_map(&make_identity_grid(&s)).dets().iter().all(|&d| d == 1.0));
    }

    #[test]
    fn affine_clouds_have_constant_interior_determinant(
        s in shape2(),
        m in prop::array::uniform4(-2.0f64..2.0),
        b in prop::array::uniform2(-5.0f64..5.0),
    ) {
        let id = make_identity_grid(&s);
        let n = s.len();
        let mut c = vec![0.0; 2 * n];
        for v in 0..n {
            let p = id.point(v);
            c[v] = m[0] * p[0] + m[1] * p[1] + b[0];
            c[n + v] = m[2] * p[0] + m[3] * p[1] + b[1];
        }
        let dets = jacobian_det_map(&VoxelCloud::new(s.clone(), c).unwrap());
        let expected = m[0] * m[3] - m[1] * m[2];
        for v in (0..n).filter(|&v| !s.on_face(v)) {
            prop_assert!((dets.dets()[v] - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn spatial_gradient_is_linear((_, _, p) in image_and_cloud(), k in 0u64..4) {
        let q = VoxelCloud::new(p.shape().clone(), p.coords().iter().map(|x| (x * 1.7 + k as f64).sin()).collect()).unwrap();
        let sum = VoxelCloud::new(p.shape().clone(), p.coords().iter().zip(q.coords()).map(|(a, b)| a + b).collect()).unwrap();
        let (gp, gq, gs) = (spatial_gradient(&p), spatial_gradient(&q), spatial_gradient(&sum));
        let d = p.ndim();
        for v in 0..p.shape().len() {
            let add: Vec<f64> = gp.matrix(v).iter().zip(gq.matrix(v)).map(|(a, b)| a + b).collect();
            prop_assert!(close(gs.matrix(v), &add, 1e-12));
            prop_assert_eq!(gs.matrix(v).len(), d * d);
        }
    }

    #[test]
    fn identity_warp_keeps_labels(s in shape_any(), seed in any::<u64>()) {
        let labels: Vec<u16> = (0..s.len() as u64).map(|v| ((v.wrapping_mul(seed | 1) >> 7) % 5) as u16).collect();
        let map = LabelMap::new(s.clone(), labels).unwrap();
        prop_assert_eq!(warp_labels(&map, &make_identity_grid(&s)).unwrap(), map);
    }

    #[test]
    fn smoothing_properties(
        s in shape_any(),
        radius in 0usize..4,
        sigma in 0.3f64..3.0,
        seed in any::<u64>(),
        c in -5.0f64..5.0,
    ) {
        let k = GaussianKernel::new(radius, sigma, s.ndim()).unwrap();
        let n = s.len();
        let u: Vec<f64> = (0..n).map(|v| ((v as u64 ^ seed) % 97) as f64 / 48.0 - 1.0).collect();
        let w: Vec<f64> = (0..n).map(|v| ((v as u64).wrapping_mul(seed | 3) % 89) as f64 / 44.0 - 1.0).collect();
        // constants survive exactly up to rounding, and nothing overshoots
        let flat = k.apply(&s, &vec![c; n]).unwrap();
        prop_assert!(flat.iter().all(|x| (x - c).abs() < 1e-12));
        let ku = k.apply(&s, &u).unwrap();
        let peak = u.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        prop_assert!(ku.iter().all(|x| x.abs() <= peak + 1e-12));
        // linearity
        let mix: Vec<f64> = u.iter().zip(&w).map(|(a, b)| 2.0 * a - 0.5 * b).collect();
        let kw = k.apply(&s, &w).unwrap();
        let lin: Vec<f64> = ku.iter().zip(&kw).map(|(a, b)| 2.0 * a - 0.5 * b).collect();
        prop_assert!(close(&k.apply(&s, &mix).unwrap(), &lin, 1e-12));
        // <K u, w> = <u, K^T w>
        let ktw = k.apply_transpose(&s, &w).unwrap();
        let lhs: f64 = ku.iter().zip(&w).map(|(a, b)| a * b).sum();
        let rhs: f64 = u.iter().zip(&ktw).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn one_minus_ncc_is_bounded((a, b, _) in image_and_cloud(), w in prop::sample::select(vec![3usize, 5, 7])) {
        let v = 1.0 - ncc(&a, &b, w).unwrap();
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&v));
        prop_assert!((1.0 - ncc(&a, &a, w).unwrap()).abs() < 1e-12 || a.values().iter().all(|x| *x == a.values()[0]));
    }

    #[test]
    fn jdet_loss_does_not_grow_with_epsilon((_, _, q) in image_and_cloud(), e1 in 0.0f64..1.0, e2 in 0.0f64..1.0) {
        let (lo, hi) = (e1.min(e2), e1.max(e2));
        prop_assert!(loss_jdet(&q, hi) <= loss_jdet(&q, lo));
    }

    #[test]
    fn losses_are_covariant_under_axis_swap(
        (a, b, q) in shape2().prop_flat_map(|s| (image(s.clone()), image(s.clone()), cloud(s, 2.0))),
        w in prop::sample::select(vec![3usize, 5]),
    ) {
        let (at, bt, qt) = (transpose_image(&a), transpose_image(&b), transpose_cloud(&q));
        let (wb, wbt) = (warp(&b, &q).unwrap(), warp(&bt, &qt).unwrap());
        prop_assert!(close(wbt.values(), transpose_image(&wb).values(), 1e-12));
        prop_assert!((ncc(&a, &wb, w).unwrap() - ncc(&at, &wbt, w).unwrap()).abs() < 1e-12);
        prop_assert!((mse(&a, &wb).unwrap() - mse(&at, &wbt).unwrap()).abs() < 1e-12);
        prop_assert!((loss_jdet(&q, 1e-3) - loss_jdet(&qt, 1e-3)).abs() < 1e-12);
        prop_assert!((loss_smt(&q) - loss_smt(&qt)).abs() < 1e-12);
        prop_assert_eq!(neg_jacobian_ratio(&q), neg_jacobian_ratio(&qt));
    }

    #[test]
    fn dice_is_symmetric_and_relabeling_invariant(
        s in shape_any(),
        seed in any::<u64>(),
        perm in Just([3u16, 0, 4, 1, 2]).prop_shuffle(),
    ) {
        let gen = |salt: u64| -> Vec<u16> {
            (0..s.len() as u64).map(|v| ((v.wrapping_mul(seed | 1).wrapping_add(salt) >> 5) % 5) as u16).collect()
        };
        let (la, lb) = (gen(0), gen(0x9e37));
        let a = LabelMap::new(s.clone(), la.clone()).unwrap();
        let b = LabelMap::new(s.clone(), lb.clone()).unwrap();
        let labels = [0u16, 1, 2, 3, 4];
        let ab = dice(&a, &b, &labels).unwrap();
        prop_assert_eq!(&ab, &dice(&b, &a, &labels).unwrap());
        let relabel = |l: &[u16]| LabelMap::new(s.clone(), l.iter().map(|&x| perm[x as usize]).collect()).unwrap();
        let pr = dice(&relabel(&la), &relabel(&lb), &labels).unwrap();
        for (l, d) in &ab.per_label {
            prop_assert_eq!(pr.per_label[&perm[*l as usize]], *d);
        }
    }

    #[test]
    fn fold_ratio_agrees_with_jdet_loss((_, _, q) in image_and_cloud()) {
        let dets = jacobian_det_map(&q);
        if loss_jdet(&q, 0.0) == 0.0 && dets.dets().iter().all(|&d| d != 0.0) {
            prop_assert_eq!(neg_jacobian_ratio(&q), 0.0);
        }
    }

    #[test]
    fn pgm_round_trips(w in 1usize..12, h in 1usize..12, maxval in 1u16..=u16::MAX, seed in any::<u64>()) {
        let samples: Vec<u16> = (0..(w * h) as u64).map(|v| (v.wrapping_mul(seed | 1) >> 3) as u16 % (maxval.saturating_add(1)).max(1)).map(|x| x.min(maxval)).collect();
        let pgm = Pgm { width: w, height: h, maxval, samples };
        prop_assert_eq!(parse_pgm(&encode_pgm(&pgm)).unwrap(), pgm);
    }
}

proptest! {
    #![proptest_config(config(12))]

    #[test]
    fn autonomous_fields_ignore_time(seed in any::<u64>(), t in 0.0f64..1.0) {
        let s = Shape::new(&[8, 8]).unwrap();
        let m = VelocityModel::neural(&s, NeuralFieldSpec::default(), TimeMode::Autonomous, 1.0).unwrap();
        let params: Vec<f64> = m.init_params(seed).iter().enumerate().map(|(i, p)| p + 0.01 * ((i as f64) * 0.37).sin()).collect();
        let m = m.with_params(params).unwrap();
        let q = make_identity_grid(&s);
        prop_assert_eq!(m.eval(&q, 0.0).unwrap(), m.eval(&q, t).unwrap());
    }

    #[test]
    fn tensor_parameter_count_grows_linearly_in_steps(s in shape_any(), steps in 1usize..6) {
        let m = VelocityModel::tensor(&s, steps, 1.0).unwrap();
        prop_assert_eq!(m.param_count(), steps * s.ndim() * s.len());
    }

    #[test]
    fn masked_flows_pin_faces_and_are_deterministic(
        s in shape_any(),
        steps in 1usize..4,
        rk4 in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let m = VelocityModel::tensor(&s, steps, 1.0).unwrap();
        let params: Vec<f64> = (0..m.param_count() as u64).map(|i| ((i ^ seed) % 13) as f64 / 4.0 - 1.5).collect();
        let m = m.with_params(params).unwrap();
        let kernel = GaussianKernel::new(1, 1.0, s.ndim()).unwrap();
        let q0 = make_identity_grid(&s);
        let mask = face_mask(&s);
        let cfg = FlowConfig { steps, scheme: if rk4 { Scheme::Rk4 } else { Scheme::Euler }, ..FlowConfig::default() };
        let traj = integrate_field(&m, &kernel, &q0, &cfg, Some(&mask)).unwrap();
        let again = integrate_field(&m, &kernel, &q0, &cfg, Some(&mask)).unwrap();
        prop_assert_eq!(traj.final_state(), again.final_state());
        let n = s.len();
        for k in 0..=steps {
            let q = traj.checkpoint(k).unwrap();
            for v in (0..n).filter(|&v| s.on_face(v)) {
                for c in 0..s.ndim() {
                    prop_assert_eq!(q[c * n + v], q0.coords()[c * n + v]);
                }
            }
        }
    }
}
