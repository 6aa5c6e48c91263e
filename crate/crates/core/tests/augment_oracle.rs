//! Augmentation geometry against an independent homogeneous-matrix oracle.

use cxr_triage::imageproc::{apply_augment, augment, AugmentConfig, AugmentParams, ImageTensor};
use cxr_triage::rng::SplitMix64;

type M3 = [[f64; 3]; 3];

fn mul(a: &M3, b: &M3) -> M3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// General 3×3 inverse via the adjugate.
fn inverse(m: &M3) -> M3 {
    let c = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let cof = [
        [c(1, 2, 1, 2), -c(1, 2, 0, 2), c(1, 2, 0, 1)],
        [-c(0, 2, 1, 2), c(0, 2, 0, 2), -c(0, 2, 0, 1)],
        [c(0, 1, 1, 2), -c(0, 1, 0, 2), c(0, 1, 0, 1)],
    ];
    let det: f64 = (0..3).map(|j| m[0][j] * cof[0][j]).sum();
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            inv[i][j] = cof[j][i] / det;
        }
    }
    inv
}

fn translate(tx: f64, ty: f64) -> M3 {
    [[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]]
}

/// Forward map in pixel coordinates (x right, y down), composed from
/// elementary matrices about the image centre.
fn forward(p: &AugmentParams, h: usize, w: usize) -> M3 {
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let flip = [
        [if p.flip_x { -1.0 } else { 1.0 }, 0.0, 0.0],
        [0.0, if p.flip_y { -1.0 } else { 1.0 }, 0.0],
        [0.0, 0.0, 1.0],
    ];
    let t = p.rotation_deg.to_radians();
    let rot = [[t.cos(), -t.sin(), 0.0], [t.sin(), t.cos(), 0.0], [0.0, 0.0, 1.0]];
    let shx = [[1.0, p.shear_x, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let shy = [[1.0, 0.0, 0.0], [p.shear_y, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let linear = mul(&shy, &mul(&shx, &mul(&rot, &flip)));
    mul(&translate(cx, cy), &mul(&linear, &translate(-cx, -cy)))
}

fn rotation(deg: f64) -> AugmentParams {
    AugmentParams { rotation_deg: deg, ..AugmentParams::IDENTITY }
}

fn ramp(h: usize, w: usize) -> ImageTensor {
    ImageTensor::from_fn(h, w, |y, x, c| 0.01 * x as f32 + 0.02 * y as f32 + 0.1 * c as f32)
}

#[test]
fn rotation_inverse_matches_matrix_oracle() {
    let (h, w) = (37, 53);
    let p = rotation(10.0);
    let a = p.inverse_affine(h, w);
    let o = inverse(&forward(&p, h, w));
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let got = (a[0][0] * xf + a[0][1] * yf + a[0][2], a[1][0] * xf + a[1][1] * yf + a[1][2]);
            let want = (o[0][0] * xf + o[0][1] * yf + o[0][2], o[1][0] * xf + o[1][1] * yf + o[1][2]);
            assert!((got.0 - want.0).abs() <= 1e-6 && (got.1 - want.1).abs() <= 1e-6, "pixel ({x}, {y})");
        }
    }
}

#[test]
fn random_compositions_match_matrix_oracle() {
    let mut rng = SplitMix64::new(31);
    for _ in 0..200 {
        let p = AugmentParams::draw(&AugmentConfig::published(), &mut rng);
        let (h, w) = (1 + rng.below(300) as usize, 1 + rng.below(300) as usize);
        let a = p.inverse_affine(h, w);
        let o = inverse(&forward(&p, h, w));
        for r in 0..2 {
            for c in 0..3 {
                assert!((a[r][c] - o[r][c]).abs() <= 1e-6, "{p:?} at [{r}][{c}]");
            }
        }
    }
}

/// Bilinear sampling reproduces a linear ramp exactly, so each interior
/// output pixel must equal the ramp evaluated at its oracle pre-image.
#[test]
fn warped_pixels_sample_the_oracle_preimage() {
    let (h, w) = (40, 40);
    let img = ramp(h, w);
    let p = rotation(10.0);
    let out = apply_augment(&img, &p);
    let o = inverse(&forward(&p, h, w));
    let mut checked = 0;
    for y in 0..h {
        for x in 0..w {
            let sx = o[0][0] * x as f64 + o[0][1] * y as f64 + o[0][2];
            let sy = o[1][0] * x as f64 + o[1][1] * y as f64 + o[1][2];
            if sx < 0.0 || sy < 0.0 || sx > (w - 1) as f64 || sy > (h - 1) as f64 {
                continue;
            }
            for c in 0..3 {
                let want = 0.01 * sx + 0.02 * sy + 0.1 * c as f64;
                assert!((out.get(y, x, c) as f64 - want).abs() < 1e-4, "pixel ({x}, {y}, {c})");
            }
            checked += 1;
        }
    }
    assert!(checked > h * w / 2);
}

#[test]
fn flips_mirror_the_expected_axis() {
    let img = ramp(5, 7);
    let lr = apply_augment(&img, &AugmentParams { flip_x: true, ..AugmentParams::IDENTITY });
    let tb = apply_augment(&img, &AugmentParams { flip_y: true, ..AugmentParams::IDENTITY });
    for y in 0..5 {
        for x in 0..7 {
            assert_eq!(lr.get(y, x, 1), img.get(y, 6 - x, 1));
            assert_eq!(tb.get(y, x, 2), img.get(4 - y, x, 2));
        }
    }
}

#[test]
fn disabled_config_is_identity_and_consumes_no_randomness() {
    let img = ramp(9, 11);
    let mut rng = SplitMix64::new(5);
    let out = augment(&img, &AugmentConfig::disabled(), &mut rng).unwrap();
    assert_eq!(out, img);
    assert_eq!(rng.next_u64(), SplitMix64::new(5).next_u64());
    let off = AugmentConfig { enabled: false, ..AugmentConfig::published() };
    assert_eq!(augment(&img, &off, &mut SplitMix64::new(6)).unwrap(), img);
}

#[test]
fn double_horizontal_flip_is_identity() {
    let mut rng = SplitMix64::new(32);
    let img = ImageTensor::from_fn(13, 17, |_, _, _| rng.next_f64() as f32);
    let f = AugmentParams { flip_x: true, ..AugmentParams::IDENTITY };
    assert_eq!(apply_augment(&apply_augment(&img, &f), &f), img);
    assert_eq!(apply_augment(&img, &AugmentParams::IDENTITY), img);
}

#[test]
fn fixed_seed_is_bit_identical() {
    let img = ramp(24, 24);
    let cfg = AugmentConfig::published();
    let a = augment(&img, &cfg, &mut SplitMix64::new(77)).unwrap();
    let b = augment(&img, &cfg, &mut SplitMix64::new(77)).unwrap();
    assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn invalid_configs_are_rejected() {
    let img = ramp(4, 4);
    for cfg in [
        AugmentConfig { flip_x_prob: 1.5, ..AugmentConfig::published() },
        AugmentConfig { rotation_range_deg: -1.0, ..AugmentConfig::published() },
        AugmentConfig { shear_range: f64::NAN, ..AugmentConfig::published() },
    ] {
        assert!(augment(&img, &cfg, &mut SplitMix64::new(0)).is_err());
    }
}
