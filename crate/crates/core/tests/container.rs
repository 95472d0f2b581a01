//! Tensor files and manifests: bit-exact round trips for every dtype, a
//! hand-assembled byte oracle, and rejection of corrupted inputs.

use std::fs;

use flowtie::container::{load_dataset, read_tensor, save_dataset, write_tensor, Bundle, Dtype, Tensor, MANIFEST};
use flowtie::microscope::{simulate_4d, ProbeParams, ScanGrid};
use flowtie::specimen::{potential_slices, CrystalStructure, Preset, SliceParams};
use flowtie::Error;
use ndarray::{ArrayD, IxDyn};
use num_complex::Complex;
use proptest::prelude::*;

fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0usize..5, 0..5)
}

fn finite_or_special() -> impl Strategy<Value = f64> {
    prop_oneof![
        any::<f64>().prop_filter("nan payloads differ", |v| !v.is_nan()),
        Just(f64::INFINITY),
        Just(-0.0),
        Just(f64::MIN_POSITIVE / 2.0),
    ]
}

fn round_trip(t: &Tensor) -> Tensor {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ntc");
    write_tensor(&path, t).unwrap();
    read_tensor(&path).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn every_dtype_round_trips_bit_exactly(shape in shape_strategy(), values in prop::collection::vec(finite_or_special(), 0..700)) {
        let n: usize = shape.iter().product();
        prop_assume!(values.len() >= 2 * n);
        let dim = IxDyn(&shape);
        let f64s = ArrayD::from_shape_vec(dim.clone(), values[..n].to_vec()).unwrap();
        let c128 = ArrayD::from_shape_vec(dim.clone(), (0..n).map(|i| Complex::new(values[i], values[n + i])).collect()).unwrap();
        let tensors = [
            Tensor::F32(f64s.mapv(|v| v as f32)),
            Tensor::F64(f64s.clone()),
            Tensor::C64(c128.mapv(|c| Complex::new(c.re as f32, c.im as f32))),
            Tensor::C128(c128),
        ];
        for t in tensors {
            let back = round_trip(&t);
            prop_assert_eq!(back.dtype(), t.dtype());
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert_eq!(back.to_bytes(), t.to_bytes());
        }
    }
}

#[test]
fn bytes_match_a_hand_assembled_file() {
    let t = Tensor::C64(ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![Complex::new(1.5f32, -2.0), Complex::new(0.25, 8.0)]).unwrap());
    let mut expect = b"NTC1".to_vec();
    expect.push(3);
    expect.push(2);
    expect.extend_from_slice(&1u64.to_le_bytes());
    expect.extend_from_slice(&2u64.to_le_bytes());
    for v in [1.5f32, -2.0, 0.25, 8.0] {
        expect.extend_from_slice(&v.to_le_bytes());
    }
    assert_eq!(t.to_bytes(), expect);
    assert_eq!(Dtype::C64.size(), 8);
    for d in [Dtype::F32, Dtype::F64, Dtype::C64, Dtype::C128] {
        assert_eq!(Dtype::from_code(d.code()), Some(d));
    }
    assert_eq!(Dtype::from_code(0), None);
}

#[test]
fn corrupted_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ntc");
    let good = Tensor::F64(ArrayD::from_elem(IxDyn(&[3]), 1.0)).to_bytes();
    let cases: Vec<Vec<u8>> = vec![
        b"NTC2".iter().chain(&good[4..]).copied().collect(),
        [&good[..4], &[9u8], &good[5..]].concat(),
        good[..good.len() - 1].to_vec(),
        [good.clone(), vec![0]].concat(),
        good[..10].to_vec(),
        Vec::new(),
    ];
    for bytes in cases {
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_tensor(&path), Err(Error::Format { .. })), "{bytes:?}");
    }
    assert!(matches!(read_tensor(&dir.path().join("missing.ntc")), Err(Error::Io { .. })));
}

#[test]
fn bundles_check_manifest_echoes() {
    let dir = tempfile::tempdir().unwrap();
    let mut b = Bundle::create(dir.path(), "test").unwrap();
    b.put_f64("a", &ndarray::arr2(&[[1.0, 2.0], [3.0, 4.0]])).unwrap();
    b.set_meta("seed", 42u64);
    b.set_meta("lambda", 0.019_687_489_006_848_9);
    b.finish().unwrap();
    let back = Bundle::open(dir.path()).unwrap();
    assert_eq!(back.manifest, b.manifest);
    assert_eq!(back.meta::<u64>("seed").unwrap(), 42);
    assert_eq!(back.meta::<f64>("lambda").unwrap(), 0.019_687_489_006_848_9);
    assert!(back.meta::<u64>("absent").is_err());
    assert!(matches!(back.get("nope"), Err(Error::MissingTensor(_))));
    // a tensor file that disagrees with its manifest entry
    write_tensor(&dir.path().join("a.ntc"), &Tensor::F64(ArrayD::zeros(IxDyn(&[4])))).unwrap();
    assert!(matches!(back.get("a"), Err(Error::Format { .. })));
    fs::write(dir.path().join(MANIFEST), "{ not json").unwrap();
    assert!(Bundle::open(dir.path()).is_err());
}

#[test]
fn datasets_round_trip() {
    let slices = potential_slices(
        &CrystalStructure::preset(Preset::SrTiO3),
        &SliceParams { n_cells_z: 2, ..Default::default() },
    )
    .unwrap();
    let scan = ScanGrid::new(&slices.grid, 8, 8).unwrap();
    let ds = simulate_4d(&slices, &ProbeParams::default(), &scan, 50.0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    fs::remove_file(dir.path().join("vfield_gt.ntc")).unwrap();
    assert!(load_dataset(dir.path()).is_err());
}
