use super::*;
use crate::rng::substream;
use rand::Rng;

fn test_camera() -> Camera {
    Camera::look_at(Point3::new(0.0, -1.4, 0.0), Point3::origin(), 76.8, 64, 64).unwrap()
}

fn axis_camera(f: f64, w: u32, h: u32) -> Camera {
    // camera at world origin looking down +z via identity-ish pose
    Camera {
        f,
        cx: w as f64 / 2.0,
        cy: h as f64 / 2.0,
        width: w,
        height: h,
        pose: RigidTransform::identity(),
        object_distance: 1.4,
    }
}

#[test]
fn backproject_principal_point_is_axis_ray() {
    let cam = axis_camera(100.0, 64, 64);
    let ray = backproject(&cam, [32.0, 32.0]).unwrap();
    assert!((ray.dir - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
    assert_eq!(ray.origin, Point3::origin());
}

#[test]
fn backproject_45_degrees() {
    let mut cam = axis_camera(100.0, 200, 200);
    cam.cx = 0.0;
    cam.cy = 0.0;
    let ray = backproject(&cam, [100.0, 0.0]).unwrap();
    let expect = Vector3::new(1.0, 0.0, 1.0) / 2.0f64.sqrt();
    assert!((ray.dir - expect).norm() < 1e-12);
}

#[test]
fn backproject_rejects_out_of_bounds() {
    let cam = axis_camera(100.0, 64, 64);
    assert!(backproject(&cam, [65.0, 10.0]).is_err());
    assert!(backproject(&cam, [10.0, -0.1]).is_err());
}

#[test]
fn project_backproject_are_mutual_inverses() {
    let cam = axis_camera(76.8, 64, 64);
    let mut rng = substream(5, "roundtrip");
    for _ in 0..10_000 {
        let p = [rng.gen_range(0.0..64.0), rng.gen_range(0.0..64.0)];
        let ray = backproject(&cam, p).unwrap();
        let t = rng.gen_range(0.1..5.0);
        let x = ray.origin + ray.dir * t;
        let q = cam.project(x).unwrap();
        assert!((q[0] - p[0]).abs() < 1e-6 && (q[1] - p[1]).abs() < 1e-6);
    }
}

#[test]
fn ray_direction_is_unit_and_forward() {
    let cam = test_camera();
    let mut rng = substream(6, "unit");
    for _ in 0..100 {
        let p = [rng.gen_range(0.0..64.0), rng.gen_range(0.0..64.0)];
        let ray = backproject(&cam, p).unwrap();
        assert!((ray.dir.norm() - 1.0).abs() < 1e-9);
        assert!(ray.dir.z > 0.0);
    }
}

#[test]
fn sample_along_ray_matches_depth_range_protocol() {
    let cam = axis_camera(100.0, 64, 64);
    let ray = backproject(&cam, [32.0, 32.0]).unwrap();
    let pts = sample_along_ray(&ray, 128, 0.63, 2.16).unwrap();
    assert_eq!(pts.len(), 128);
    assert!((pts[0].z - 0.63).abs() < 1e-12);
    assert!((pts[127].z - 2.16).abs() < 1e-12);
    let step = (2.16 - 0.63) / 127.0;
    for w in pts.windows(2) {
        assert!(((w[1] - w[0]).norm() - step).abs() < 1e-9);
    }
}

#[test]
fn sample_along_ray_endpoints_and_small_m() {
    let cam = axis_camera(100.0, 64, 64);
    let ray = backproject(&cam, [32.0, 32.0]).unwrap();
    let two = sample_along_ray(&ray, 2, 1.0, 2.0).unwrap();
    assert!((two[0].z - 1.0).abs() < 1e-12 && (two[1].z - 2.0).abs() < 1e-12);

    let three = sample_along_ray(&ray, 3, 1.0, 2.0).unwrap();
    assert!((three[1] - Point3::new(0.0, 0.0, 1.5)).norm() < 1e-12);
    assert!(sample_along_ray(&ray, 1, 1.0, 2.0).is_err());
}

#[test]
fn scale_factor_formula_and_linearity() {
    // object distance 1.5 with f equal to half the image width -> s = 1.5
    let mut cam = axis_camera(32.0, 64, 64);
    cam.object_distance = 1.5;
    assert!((scale_factor(&cam) - 1.5).abs() < 1e-12);
    cam.object_distance = 3.0;
    assert!((scale_factor(&cam) - 3.0).abs() < 1e-12);
}

#[test]
fn scale_factor_is_resolution_invariant() {
    // same physical camera rendered at 2x resolution: f and W scale together
    let mut lo = axis_camera(76.8, 64, 64);
    lo.object_distance = 1.4;
    let mut hi = axis_camera(153.6, 128, 128);
    hi.object_distance = 1.4;
    assert!((scale_factor(&lo) - scale_factor(&hi)).abs() < 1e-12);
}

#[test]
fn camera_validate_rejects_bad_rotation() {
    let mut cam = axis_camera(100.0, 64, 64);
    cam.pose.rot[0][0] = 1.5;
    assert!(cam.validate().is_err());
}

fn test_grid(s: usize, m: usize) -> FrustumGrid {
    let cam = axis_camera(76.8, 64, 64);
    FrustumGrid::new(s, s, m, 0.63, 2.16, &cam).unwrap()
}

#[test]
fn world_to_frustum_axis_point() {
    let g = test_grid(16, 8);
    match world_to_frustum(&g, Point3::new(0.0, 0.0, 1.0)) {
        FrustumCoord::Inside { u, v, t } => {
            assert!((u - 32.0).abs() < 1e-12);
            assert!((v - 32.0).abs() < 1e-12);
            assert!((t - 1.0).abs() < 1e-12);
        }
        FrustumCoord::Outside => panic!("axis point must be inside"),
    }
}

#[test]
fn world_to_frustum_boundary_and_behind() {
    let g = test_grid(16, 8);
    assert_eq!(
        world_to_frustum(&g, Point3::new(0.0, 0.0, 2.17)),
        FrustumCoord::Outside
    );
    assert_eq!(
        world_to_frustum(&g, Point3::new(0.0, 0.0, -1.0)),
        FrustumCoord::Outside
    );
}

#[test]
fn frustum_round_trip_through_ray_samples() {
    // the frustum grid nodes are exactly the training sample sites
    let cam = axis_camera(76.8, 64, 64);
    let g = test_grid(64, 16);
    let mut rng = substream(7, "frustum");
    for _ in 0..1000 {
        let p = [rng.gen_range(0.5..63.5), rng.gen_range(0.5..63.5)];
        let ray = backproject(&cam, p).unwrap();
        let pts = sample_along_ray(&ray, 16, 0.63, 2.16).unwrap();
        for (i, &x) in pts.iter().enumerate() {
            match world_to_frustum(&g, x) {
                FrustumCoord::Inside { u, v, t } => {
                    assert!((u - p[0]).abs() < 1e-9);
                    assert!((v - p[1]).abs() < 1e-9);
                    assert!((t - g.t_of(i)).abs() < 1e-9);
                }
                FrustumCoord::Outside => panic!("sample site left the shell"),
            }
        }
    }
}

#[test]
fn grid_nodes_reproduce_their_values_exactly() {
    let mut g = test_grid(16, 8);
    let mut rng = substream(8, "nodes");
    for v in g.values.iter_mut() {
        *v = rng.gen_range(0.0..1.0);
    }
    let cam = axis_camera(76.8, 64, 64);
    for iv in 0..16 {
        for iu in 0..16 {
            let ray = backproject(&cam, [g.lattice_u(iu), g.lattice_v(iv)]).unwrap();
            for it in 0..8 {
                let x = ray.origin + ray.dir * g.t_of(it);
                let got = g.sample_at_camera_point(x).expect("node inside");
                let want = g.values[g.idx(iu, iv, it)];
                assert!((got - want).abs() < 1e-6, "node ({iu},{iv},{it})");
            }
        }
    }
}

#[test]
fn resample_constant_field() {
    let mut g = test_grid(16, 8);
    g.values.fill(0.7);
    let bounds = Aabb::new(Point3::new(-0.2, -0.2, 1.2), Point3::new(0.2, 0.2, 1.6));
    let out = resample_frustum_to_grid(&g, 8, &bounds).unwrap();
    for &v in &out {
        assert!((v - 0.7).abs() < 1e-6);
    }
}

#[test]
fn resample_reproduces_index_linear_fields() {
    let mut g = test_grid(16, 8);
    for iv in 0..16 {
        for iu in 0..16 {
            for it in 0..8 {
                let idx = g.idx(iu, iv, it);
                g.values[idx] = (0.03 * iu as f64 + 0.05 * iv as f64 + 0.11 * it as f64) as f32;
            }
        }
    }
    let mut rng = substream(9, "linear");
    for _ in 0..500 {
        // stay inside the lattice hull so no border clamping kicks in
        let fu = rng.gen_range(0.0..15.0);
        let fv = rng.gen_range(0.0..15.0);
        let ft = rng.gen_range(0.0..7.0);
        let got = g.trilinear_index(fu, fv, ft) as f64;
        let want = 0.03 * fu + 0.05 * fv + 0.11 * ft;
        assert!((got - want).abs() < 1e-6, "({fu},{fv},{ft}): {got} vs {want}");
    }
}

/// Smooth-field convergence: doubling the frustum resolution must cut the
/// max resampling error by at least 3.5x (second-order interpolation).
#[test]
fn resample_convergence_is_second_order() {
    let field = |u: f64, v: f64, t: f64| {
        ((u / 64.0) * 3.0).sin() * ((v / 64.0) * 2.0).cos() + (t * 2.0).sin() * 0.5
    };
    let cam = axis_camera(76.8, 64, 64);
    let make = |s: usize, m: usize| {
        let mut g = FrustumGrid::new(s, s, m, 0.63, 2.16, &cam).unwrap();
        for iv in 0..s {
            for iu in 0..s {
                for it in 0..m {
                    let idx = g.idx(iu, iv, it);
                    g.values[idx] = field(g.lattice_u(iu), g.lattice_v(iv), g.t_of(it)) as f32;
                }
            }
        }
        g
    };
    let coarse = make(16, 16);
    let fine = make(32, 32);

    let mut rng = substream(10, "conv");
    let mut err_coarse = 0.0f64;
    let mut err_fine = 0.0f64;
    for _ in 0..4000 {
        // query points well inside both lattice hulls
        let x = Point3::new(rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15), rng.gen_range(1.1..1.7));
        let exact = match world_to_frustum(&coarse, x) {
            FrustumCoord::Inside { u, v, t } => field(u, v, t),
            FrustumCoord::Outside => continue,
        };
        let c = coarse.sample_at_camera_point(x).unwrap() as f64;
        let f = fine.sample_at_camera_point(x).unwrap() as f64;
        err_coarse = err_coarse.max((c - exact).abs());
        err_fine = err_fine.max((f - exact).abs());
    }
    assert!(
        err_coarse / err_fine >= 3.5,
        "convergence ratio {:.2} (coarse {:.2e}, fine {:.2e})",
        err_coarse / err_fine,
        err_coarse,
        err_fine
    );
}

#[test]
fn camera_json_round_trip() {
    let cam = test_camera();
    let json = serde_json::to_string(&cam).unwrap();
    assert!(json.contains("\"W\":64") && json.contains("\"R\":["));
    let back: Camera = serde_json::from_str(&json).unwrap();
    assert_eq!(cam, back);
}

#[test]
fn rigid_transform_inverse_composes_to_identity() {
    let cam = test_camera();
    let fwd = cam.pose;
    let inv = fwd.inverse();
    let mut rng = substream(11, "rigid");
    for _ in 0..100 {
        let p = Point3::new(
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
        );
        let q = inv.apply(fwd.apply(p));
        assert!((q - p).norm() < 1e-9);
    }
}
