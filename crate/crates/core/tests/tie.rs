//! Transport-of-intensity solver against closed-form eigenmodes, linearity
//! and regularization invariants, and simulated crystals.

use std::f64::consts::PI;

use flowtie::field::{Grid2, Spectral};
use flowtie::microscope::{simulate_4d, ProbeParams, ScanGrid};
use flowtie::recon::correlation;
use flowtie::specimen::{potential_slices, CrystalStructure, Preset, SliceParams};
use flowtie::tie::{tie_channel, tie_phase, tie_phase_with, tie_reconstruct, TieVariant};
use ndarray::{s, Array2, Array3};
use proptest::prelude::*;

const LAMBDA: f64 = 0.0197;

fn scan16() -> ScanGrid {
    ScanGrid::new(&Grid2::square(16, 0.3).unwrap(), 16, 16).unwrap()
}

fn l2(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[test]
fn cosine_eigenmode_is_recovered_exactly() {
    let scan = scan16();
    let g = scan.grid();
    for (mx, my) in [(1usize, 0usize), (2, 3), (0, 5)] {
        let (kx, ky) = (2.0 * PI * mx as f64 / g.extent_x(), 2.0 * PI * my as f64 / g.extent_y());
        let k2 = kx * kx + ky * ky;
        let phi = Array2::from_shape_fn((16, 16), |(y, x)| {
            (kx * x as f64 * g.pitch_x + ky * y as f64 * g.pitch_y).cos()
        });
        let mean_i = 0.37;
        // ∇²φ = -k²φ, so φ = poisson(-(2π/λ) i'/ī) needs i' = (λ/2π) ī k² φ.
        let di = phi.mapv(|v| LAMBDA / (2.0 * PI) * mean_i * k2 * v);
        let got = tie_channel(&di, mean_i, LAMBDA, &scan, 0.0);
        let err = (&got - &phi).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-9, "mode ({mx},{my}): {err}");
    }
}

#[test]
fn uniform_intensity_teague_equals_poisson() {
    let scan = scan16();
    let i0 = Array3::from_elem((2, 16, 16), 0.25);
    // band-limited below Nyquist, where the gradient in Teague's form is exact
    let w = 2.0 * PI / 16.0;
    let di = Array3::from_shape_fn((2, 16, 16), |(c, y, x)| {
        ((x * (c + 1)) as f64 * w).sin() * (3.0 * y as f64 * w).cos() + 0.3 * ((x + 2 * y) as f64 * w).cos()
    });
    let a = tie_phase_with(&i0, &di, LAMBDA, &scan, 0.0, TieVariant::Poisson).unwrap();
    let b = tie_phase_with(&i0, &di, LAMBDA, &scan, 0.0, TieVariant::Teague).unwrap();
    for (u, v) in a.phase.iter().zip(b.phase.iter()) {
        assert!((u - v).abs() < 1e-9);
    }
}

#[test]
fn phases_satisfy_the_transport_equation() {
    // The Laplacian of the solution returns the zero-mean right-hand side.
    let scan = scan16();
    let di = Array2::from_shape_fn((16, 16), |(y, x)| (2.0 * PI * x as f64 / 16.0).sin() + 0.5 * (2.0 * PI * 2.0 * y as f64 / 16.0).cos());
    let mean_i = 0.8;
    let phi = tie_channel(&di, mean_i, LAMBDA, &scan, 0.0);
    let lap = Spectral::new(scan.grid()).laplacian(phi.view());
    let rhs = di.mapv(|v| -2.0 * PI / LAMBDA * v / mean_i);
    let rhs = &rhs - rhs.mean().unwrap();
    for (a, b) in lap.iter().zip(rhs.iter()) {
        assert!((a - b).abs() < 1e-8 * (1.0 + b.abs()));
    }
}

fn stack(seed: u64) -> Array3<f64> {
    Array3::from_shape_fn((2, 16, 16), |(c, y, x)| {
        let t = (seed as f64 + 1.0) * 0.37;
        ((x as f64 + t) * 0.9 + c as f64).sin() * ((y as f64 - t) * 0.45).cos() + 0.1 * t
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn linear_in_the_derivative(a in -3.0f64..3.0, b in -3.0f64..3.0, s1 in 0u64..100, s2 in 0u64..100) {
        let scan = scan16();
        let i0 = Array3::from_elem((2, 16, 16), 0.6);
        let (x, y) = (stack(s1), stack(s2));
        let combo = &x * a + &y * b;
        let px = tie_phase(&i0, &x, LAMBDA, &scan, 0.0).unwrap().phase;
        let py = tie_phase(&i0, &y, LAMBDA, &scan, 0.0).unwrap().phase;
        let pc = tie_phase(&i0, &combo, LAMBDA, &scan, 0.0).unwrap().phase;
        let expect = &px * a + &py * b;
        let scale = 1.0 + expect.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (u, v) in pc.iter().zip(expect.iter()) {
            prop_assert!((u - v).abs() < 1e-9 * scale);
        }
    }

    #[test]
    fn constant_offsets_do_not_change_the_phase(offset in -10.0f64..10.0, seed in 0u64..100) {
        let scan = scan16();
        let i0 = Array3::from_elem((2, 16, 16), 0.6);
        let di = stack(seed);
        let base = tie_phase(&i0, &di, LAMBDA, &scan, 0.0).unwrap().phase;
        let shifted = tie_phase(&i0, &(&di + offset), LAMBDA, &scan, 0.0).unwrap().phase;
        for (u, v) in base.iter().zip(shifted.iter()) {
            prop_assert!((u - v).abs() < 1e-8);
        }
        for c in 0..2 {
            prop_assert!(base.slice(s![c, .., ..]).mean().unwrap().abs() < 1e-10);
        }
    }

    #[test]
    fn regularization_shrinks_the_solution(seed in 0u64..100, e1 in 0.0f64..10.0, de in 0.0f64..10.0) {
        let scan = scan16();
        let di = stack(seed).slice(s![0, .., ..]).to_owned();
        let a = tie_channel(&di, 0.5, LAMBDA, &scan, e1);
        let b = tie_channel(&di, 0.5, LAMBDA, &scan, e1 + de);
        prop_assert!(l2(&b) <= l2(&a) * (1.0 + 1e-12));
    }
}

#[test]
fn negative_eps_is_rejected() {
    let scan = scan16();
    let i0 = Array3::from_elem((1, 16, 16), 0.6);
    assert!(tie_phase(&i0, &Array3::zeros((1, 16, 16)), LAMBDA, &scan, -1e-3).is_err());
    assert!(tie_phase(&i0, &Array3::zeros((1, 16, 16)), 0.0, &scan, 0.0).is_err());
}

#[test]
fn thin_gaas_is_resolved() {
    let slices = potential_slices(&CrystalStructure::preset(Preset::GaAs), &SliceParams::default()).unwrap();
    let scan = ScanGrid::new(&slices.grid, 16, 16).unwrap();
    let ds = simulate_4d(&slices, &ProbeParams::default(), &scan, 50.0).unwrap();
    let r = tie_reconstruct(&ds, 0.0, TieVariant::Poisson).unwrap();
    let corr = correlation(&r.phase_proj, &ds.proj_phase_gt).unwrap();
    assert!(corr > 0.8, "correlation {corr}");
    assert!(r.mse.is_finite() && r.mse > 0.0);
    assert_eq!(r.phase_stack.as_ref().unwrap().dim(), (256, 16, 16));
}

#[test]
fn vacuum_reconstructs_flat() {
    let vac = CrystalStructure::vacuum([4.0; 3]).unwrap();
    let slices = potential_slices(&vac, &SliceParams::default()).unwrap();
    let scan = ScanGrid::new(&slices.grid, 8, 8).unwrap();
    let ds = simulate_4d(&slices, &ProbeParams::default(), &scan, 50.0).unwrap();
    let r = tie_reconstruct(&ds, 0.0, TieVariant::Poisson).unwrap();
    assert!(r.phase_proj.iter().all(|v| v.abs() < 1e-9));
    assert!(r.mse < 1e-18);
    // every channel outside the aperture is dark
    let bright = ds.i_zero.slice(s![.., 0, 0]).iter().filter(|v| **v >= 1e-12).count();
    assert_eq!(r.dark_channels, 256 - bright);
}
