use dpenet::data::netpbm::{decode_pgm, decode_ppm, encode_pgm, encode_ppm};
use dpenet::data::synth::{MAX_FOREGROUND, MIN_FOREGROUND};
use dpenet::data::{generate_synthetic_dataset, resize_mask, split_dataset, DatasetDir, Purpose, SampleSource};

#[test]
fn foreground_fraction_stays_in_bounds_over_100_seeds() {
    for seed in 0..100 {
        let s = &generate_synthetic_dataset::<f32>(1, (96, 128), seed).unwrap()[0];
        let fg = s.mask.data().iter().filter(|&&v| v == 1.0).count() as f64 / (96.0 * 128.0);
        assert!((MIN_FOREGROUND..=MAX_FOREGROUND).contains(&fg), "seed {seed}: {fg}");
    }
}

#[test]
fn foreground_bounds_hold_at_minimum_and_default_sizes() {
    for hw in [(16, 16), (288, 384)] {
        for s in generate_synthetic_dataset::<f32>(5, hw, 3).unwrap() {
            let fg = s.mask.sum() as f64 / (hw.0 * hw.1) as f64;
            assert!((MIN_FOREGROUND..=MAX_FOREGROUND).contains(&fg), "{hw:?} {}: {fg}", s.id);
        }
    }
}

#[test]
fn split_partitions_612_ids_for_1000_seeds() {
    let ids: Vec<String> = (0..612).map(|i| format!("img{i}")).collect();
    for seed in 0..1000 {
        let s = split_dataset(&ids, seed).unwrap();
        assert_eq!((s.train.len(), s.test.len(), s.val.len()), (489, 61, 62));
        let mut all: Vec<&String> = s.train.iter().chain(&s.test).chain(&s.val).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 612, "seed {seed}");
    }
}

#[test]
fn mask_binarity_survives_the_whole_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let samples = generate_synthetic_dataset::<f32>(10, (48, 64), 9).unwrap();
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let ds = DatasetDir::new(dir.path());
    ds.write(&samples, &split_dataset(&ids, 9).unwrap()).unwrap();
    for (s, id) in samples.iter().zip(&ids) {
        let back: dpenet::data::Sample<f32> = ds.load(id, Purpose::Evaluate).unwrap();
        assert_eq!(back.mask, s.mask);
        let resized = resize_mask(&back.mask, (37, 23)).unwrap();
        assert!(resized.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}

#[test]
fn quantized_images_round_trip_bit_exactly() {
    for s in generate_synthetic_dataset::<f64>(3, (20, 30), 4).unwrap() {
        let once = decode_ppm::<f64>(&encode_ppm(&s.image).unwrap()).unwrap();
        let twice = decode_ppm::<f64>(&encode_ppm(&once).unwrap()).unwrap();
        assert!(once.data().iter().zip(twice.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let mask = decode_pgm::<f64>(&encode_pgm(&s.mask).unwrap()).unwrap();
        assert_eq!(mask, s.mask);
    }
}

#[test]
fn generated_directory_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let samples = generate_synthetic_dataset::<f32>(10, (16, 32), 21).unwrap();
        let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
        DatasetDir::new(dir.path()).write(&samples, &split_dataset(&ids, 21).unwrap()).unwrap();
    }
    for rel in ["split.txt", "images/syn_00003.ppm", "masks/syn_00007.pgm"] {
        assert_eq!(std::fs::read(a.path().join(rel)).unwrap(), std::fs::read(b.path().join(rel)).unwrap(), "{rel}");
    }
}
