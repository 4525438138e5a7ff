use std::collections::BTreeSet;

use cnnav::data::{
    decode_pnm, encode_pnm, generate_synthetic, load_pgm, load_ppm, nearest_centroid_accuracy, read_index, save_pgm,
    save_ppm, Dataset, Generator, Split, SyntheticSpec,
};
use cnnav::{Error, Tensor};
use proptest::prelude::*;

fn quiet(classes: usize, per: usize, seed: u64) -> SyntheticSpec {
    let mut spec = SyntheticSpec::new(classes, per, 32, seed);
    spec.noise_std = 0.0;
    spec
}

#[test]
fn spec_defaults_and_validation() {
    let spec = SyntheticSpec::new(8, 40, 64, 3);
    assert_eq!(spec.motif_size, 8);
    assert_eq!(spec.len(), 320);
    assert!(spec.validate().is_ok());
    for bad in [
        SyntheticSpec { motif_size: 64, ..spec.clone() },
        SyntheticSpec { motif_size: 0, ..spec.clone() },
        SyntheticSpec { noise_std: -0.1, ..spec.clone() },
        SyntheticSpec { noise_std: f32::NAN, ..spec.clone() },
        SyntheticSpec { num_classes: 0, ..spec.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        assert!(generate_synthetic(&bad).is_err());
    }
}

#[test]
fn generation_is_deterministic() {
    let spec = SyntheticSpec::new(3, 4, 32, 9);
    let a = generate_synthetic(&spec).unwrap();
    let b = generate_synthetic(&spec).unwrap();
    assert_eq!(a.images(), b.images());
    assert_eq!(a.labels(), b.labels());
    let c = generate_synthetic(&SyntheticSpec { seed: 10, ..spec }).unwrap();
    assert_ne!(a.images(), c.images());
}

#[test]
fn same_class_same_location_is_identical_without_noise() {
    let g = Generator::new(quiet(4, 5, 1)).unwrap();
    for class in 0..4 {
        assert_eq!(g.render(class, (3, 7), 0), g.render(class, (3, 7), 11));
    }
    assert_ne!(g.render(0, (3, 7), 0), g.render(1, (3, 7), 0));
}

#[test]
fn pixel_values_lie_in_unit_range() {
    let mut spec = SyntheticSpec::new(4, 6, 32, 2);
    spec.noise_std = 0.5;
    let ds = generate_synthetic(&spec).unwrap();
    assert_eq!(ds.images().shape(), &[24, 3, 32, 32]);
    assert!(ds.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
}

fn inside(at: (usize, usize), m: usize, y: usize, x: usize) -> bool {
    (at.0..at.0 + m).contains(&y) && (at.1..at.1 + m).contains(&x)
}

#[test]
fn class_difference_is_confined_to_motifs() {
    let spec = quiet(6, 3, 4);
    let m = spec.motif_size;
    let g = Generator::new(spec).unwrap();
    for (a, b, pa, pb) in [(0, 1, (0, 0), (0, 0)), (2, 5, (1, 20), (17, 3)), (3, 3, (9, 9), (22, 0))] {
        let (ia, ib) = (g.render(a, pa, 0), g.render(b, pb, 1));
        let mut differs_inside = false;
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    let d = ia.at(&[c, y, x]) - ib.at(&[c, y, x]);
                    if inside(pa, m, y, x) || inside(pb, m, y, x) {
                        differs_inside |= d != 0.0;
                    } else {
                        assert_eq!(d, 0.0, "classes {a},{b} pixel ({c},{y},{x})");
                    }
                }
            }
        }
        assert!(differs_inside);
    }
}

#[test]
fn motif_placement_stays_inside_image() {
    let spec = quiet(2, 50, 5);
    let (s, m) = (spec.image_size, spec.motif_size);
    let g = Generator::new(spec).unwrap();
    let spots: BTreeSet<_> = (0..100).map(|i| g.placement(i)).collect();
    assert!(spots.iter().all(|&(y, x)| y + m <= s && x + m <= s));
    assert!(spots.len() > 50);
}

#[test]
fn split_is_eighty_twenty_per_class() {
    let ds = generate_synthetic(&quiet(3, 10, 0)).unwrap();
    let (train, test) = (ds.indices(Split::Train), ds.indices(Split::Test));
    assert_eq!((train.len(), test.len()), (24, 6));
    for class in 0..3 {
        assert_eq!(train.iter().filter(|&&i| ds.labels()[i] == class).count(), 8);
        assert_eq!(test.iter().filter(|&&i| ds.labels()[i] == class).count(), 2);
    }
    let all: BTreeSet<_> = train.iter().chain(test).copied().collect();
    assert_eq!(all.len(), 30);
}

#[test]
fn tiny_classes_still_split() {
    let labels = vec![0, 0, 1];
    let ds = Dataset::new(Tensor::zeros(vec![3, 3, 4, 4]), labels, 2).unwrap();
    assert_eq!(ds.indices(Split::Train), &[0, 2]);
    assert_eq!(ds.indices(Split::Test), &[1]);
    assert!(Dataset::new(Tensor::zeros(vec![3, 3, 4, 4]), vec![0, 1, 2], 2).is_err());
    assert!(Dataset::new(Tensor::zeros(vec![3, 3, 4, 4]), vec![0, 1], 2).is_err());
}

#[test]
fn batches_cover_split_and_shuffle_deterministically() {
    let ds = generate_synthetic(&quiet(4, 10, 1)).unwrap();
    let train: BTreeSet<_> = ds.indices(Split::Train).iter().copied().collect();
    let full = ds.batches(Split::Train, 1000, Some(3)).unwrap();
    assert_eq!(full.len(), 1);
    assert_eq!(full[0].iter().copied().collect::<BTreeSet<_>>(), train);
    assert_eq!(full[0].len(), train.len());

    let a = ds.batches(Split::Train, 7, Some(3)).unwrap();
    assert_eq!(a, ds.batches(Split::Train, 7, Some(3)).unwrap());
    assert_ne!(a, ds.batches(Split::Train, 7, Some(4)).unwrap());
    assert!(a.iter().all(|b| !b.is_empty() && b.len() <= 7));
    let mut flat: Vec<usize> = a.concat();
    flat.sort_unstable();
    assert_eq!(flat, train.iter().copied().collect::<Vec<_>>());

    let ordered = ds.batches(Split::Test, 3, None).unwrap();
    assert_eq!(ordered.concat(), ds.indices(Split::Test));
    assert!(ds.batches(Split::Train, 0, None).is_err());
}

#[test]
fn gather_returns_images_and_labels() {
    let ds = generate_synthetic(&quiet(2, 4, 6)).unwrap();
    let (x, y) = ds.gather(&[5, 1]);
    assert_eq!(x.shape(), &[2, 3, 32, 32]);
    assert_eq!(y, vec![1, 0]);
    assert_eq!(x.select_batch(0), ds.images().select_batch(5));
}

#[test]
fn pnm_round_trip_within_one_level() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic(&SyntheticSpec::new(2, 1, 32, 3)).unwrap();
    let img = ds.images().select_batch(0).reshape(vec![3, 32, 32]).unwrap();
    let p = dir.path().join("a.ppm");
    save_ppm(&img, &p).unwrap();
    let back = load_ppm(&p).unwrap();
    assert_eq!(back.shape(), img.shape());
    assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-7);

    let gray = Tensor::from_fn(vec![1, 5, 7], |k| k as f32 / 34.0);
    let q = dir.path().join("g.pgm");
    save_pgm(&gray, &q).unwrap();
    assert!(load_pgm(&q).unwrap().max_abs_diff(&gray) <= 1.0 / 255.0);
    assert!(load_ppm(&q).is_err());
    assert!(save_ppm(&gray, dir.path().join("x.ppm")).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn encoded_bytes_decode_exactly(bytes in proptest::collection::vec(any::<u8>(), 12)) {
        let img = Tensor::from_fn(vec![3, 2, 2], |k| {
            let (c, p) = (k / 4, k % 4);
            bytes[p * 3 + c] as f32 / 255.0
        });
        let encoded = encode_pnm(&img).unwrap();
        let decoded = decode_pnm(&encoded).unwrap();
        prop_assert_eq!(decoded, img);
    }
}

#[test]
fn directory_round_trip_preserves_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic(&SyntheticSpec::new(3, 4, 32, 8)).unwrap();
    ds.write_dir(dir.path()).unwrap();
    let index = read_index(dir.path()).unwrap();
    assert_eq!(index.len(), 12);
    assert_eq!(index.iter().map(|(_, l)| *l).collect::<Vec<_>>(), ds.labels());
    let back = Dataset::load_dir(dir.path()).unwrap();
    assert_eq!(back.labels(), ds.labels());
    assert_eq!(back.num_classes(), 3);
    assert_eq!(back.indices(Split::Test), ds.indices(Split::Test));
    assert!(back.images().max_abs_diff(ds.images()) <= 0.5 / 255.0 + 1e-7);
    assert!(Dataset::load_dir(&dir.path().join("missing")).is_err());
}

#[test]
fn nearest_centroid_is_near_chance() {
    let mut spec = SyntheticSpec::new(8, 40, 64, 0);
    spec.noise_std = 0.15;
    let ds = generate_synthetic(&spec).unwrap();
    let acc = nearest_centroid_accuracy(&ds);
    assert!(acc <= 2.0 / 8.0, "{acc}");
}
