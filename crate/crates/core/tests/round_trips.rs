use dpenet::checkpoint::{load_checkpoint, save_checkpoint};
use dpenet::data::{generate_synthetic_dataset, read_pgm, read_ppm, write_pgm, write_ppm};
use dpenet::{NetConfig, NetVariant, Network, SeededRng, Shape, Tensor};

#[test]
fn checkpoint_restores_every_tensor_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    for variant in [NetVariant::DualOnly, NetVariant::SingleOnly, NetVariant::Both] {
        let cfg = NetConfig {
            variant,
            ..NetConfig::desk()
        };
        let mut net = Network::<f32>::build(&cfg, 17).unwrap();
        // Move the BN buffers off their initial values.
        let x = generate_synthetic_dataset::<f32>(2, (96, 128), 1).unwrap();
        let batch = dpenet::data::batch(&x).unwrap().0;
        let mut g = dpenet::Graph::new();
        let p = net.attach(&mut g, false);
        let xv = g.constant(batch.clone());
        net.forward(&mut g, xv, &p, dpenet::Mode::Train).unwrap();

        let path = dir.path().join(format!("{variant}.ckpt"));
        save_checkpoint(&net, &path).unwrap();
        let mut back = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(back.config(), net.config());
        for (a, b) in net.store().entries().iter().zip(back.store().entries()) {
            assert_eq!(a.name, b.name);
            assert!(a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "{}", a.name);
        }
        assert_eq!(back.predict(&batch).unwrap(), net.predict(&batch).unwrap());
    }
}

#[test]
fn dpet_files_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = SeededRng::new(5);
    for dims in [vec![7], vec![2, 3], vec![2, 3, 4], vec![2, 3, 4, 5]] {
        let shape = Shape::new(&dims).unwrap();
        let data: Vec<f32> = (0..shape.numel()).map(|_| rng.standard_normal() as f32 * 1e3).collect();
        let t = Tensor::new(shape, data).unwrap();
        let path = dir.path().join("t.dpet");
        t.save(&path).unwrap();
        let back = Tensor::<f32>::load(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert!(t.data().iter().zip(back.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn netpbm_files_round_trip_for_quantized_data() {
    let dir = tempfile::tempdir().unwrap();
    let s = &generate_synthetic_dataset::<f32>(1, (24, 40), 8).unwrap()[0];
    let quantized = s.image.map(|v| (v * 255.0).round() / 255.0).unwrap();
    write_ppm(&dir.path().join("a.ppm"), &quantized).unwrap();
    let back: Tensor<f32> = read_ppm(&dir.path().join("a.ppm")).unwrap();
    assert!(quantized.data().iter().zip(back.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    write_pgm(&dir.path().join("a.pgm"), &s.mask).unwrap();
    assert_eq!(read_pgm::<f32>(&dir.path().join("a.pgm")).unwrap(), s.mask);
}
