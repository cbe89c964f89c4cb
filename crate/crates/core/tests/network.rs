use lpnet::loss::multiscale_loss;
use lpnet::network::{read_checkpoint, write_checkpoint, ArchConfig, LpNet, SCALES};
use lpnet::scene::{generate_scene, Scene, SceneSpec};
use lpnet::sparse::SparseDepth;
use lpnet::{Tape, Tensor};

fn small_arch(base: usize) -> ArchConfig {
    ArchConfig {
        base_channels: base,
        multipliers: [1, 2, 4, 8, 8],
        mfp_paths: 1,
        sdf_kernel: 3,
    }
}

fn scene(seed: u64, size: usize) -> Scene {
    generate_scene(&SceneSpec::random(seed, size, size, size * size / 8)).unwrap()
}

#[test]
fn encoder_and_decoder_shapes() {
    let model = LpNet::new(small_arch(16), 1).unwrap();
    let sc = scene(2, 32);
    let tape = Tape::new();
    let p = model.params().bind(&tape, false);
    let enc = model.encode(&tape, &p, &sc.image, &sc.sparse).unwrap();
    let shapes: Vec<Vec<usize>> = enc.iter().map(|v| v.shape().to_vec()).collect();
    let expect = [[1, 16, 32, 32], [1, 32, 16, 16], [1, 64, 8, 8], [1, 128, 4, 4], [1, 128, 2, 2]];
    assert_eq!(shapes, expect.iter().map(|s| s.to_vec()).collect::<Vec<_>>());

    let dec = model.decode(&p, &enc, 0).unwrap();
    let dshapes: Vec<Vec<usize>> = dec.iter().map(|v| v.shape().to_vec()).collect();
    assert_eq!(dshapes, expect.iter().rev().map(|s| s.to_vec()).collect::<Vec<_>>());
}

#[test]
fn prediction_pyramid_shapes_and_finiteness() {
    let model = LpNet::new(small_arch(4), 3).unwrap();
    let sc = scene(4, 32);
    let tape = Tape::new();
    let p = model.params().bind(&tape, false);
    let pyr = model.progressive_predict(&tape, &p, &sc.image, &sc.sparse, SCALES).unwrap();
    assert_eq!(pyr.steps(), SCALES);
    assert_eq!(pyr.selection.len(), SCALES - 1);
    for (k, d) in pyr.depth.iter().enumerate() {
        let side = 32 >> (SCALES - 1 - k);
        assert_eq!(d.shape(), &[1, 1, side, side]);
        assert!(d.value().is_finite());
        let c = pyr.confidence[k].value();
        assert!(c.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert!(pyr.coarse[0].value().data().iter().all(|&v| v > 0.0));
}

#[test]
fn seeds_change_initialisation() {
    let sc = scene(5, 32);
    let a = LpNet::new(small_arch(4), 10)
        .unwrap()
        .infer_steps(&sc.image, &sc.sparse, SCALES)
        .unwrap();
    let b = LpNet::new(small_arch(4), 10)
        .unwrap()
        .infer_steps(&sc.image, &sc.sparse, SCALES)
        .unwrap();
    let c = LpNet::new(small_arch(4), 11)
        .unwrap()
        .infer_steps(&sc.image, &sc.sparse, SCALES)
        .unwrap();
    assert_eq!(a, b);
    assert!(a.max_abs_diff(&c) > 0.0);
}

#[test]
fn zero_head_predicts_ln2() {
    let mut model = LpNet::new(small_arch(4), 6).unwrap();
    for name in ["head.weight", "head.bias"] {
        let id = model.params().find(name).unwrap();
        let t = model.params_mut().get_mut(id);
        *t = Tensor::zeros(t.shape());
    }
    let sc = scene(7, 32);
    let tape = Tape::new();
    let p = model.params().bind(&tape, false);
    let pyr = model.progressive_predict(&tape, &p, &sc.image, &sc.sparse, 1).unwrap();
    for &v in pyr.coarse[0].value().data() {
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }
}

#[test]
fn early_exit_is_a_prefix_of_the_full_run() {
    let model = LpNet::new(small_arch(4), 8).unwrap();
    let sc = scene(9, 32);
    let tape = Tape::new();
    let p = model.params().bind(&tape, false);
    let full = model.progressive_predict(&tape, &p, &sc.image, &sc.sparse, SCALES).unwrap();
    for steps in 1..=SCALES {
        let part = model.progressive_predict(&tape, &p, &sc.image, &sc.sparse, steps).unwrap();
        assert_eq!(part.steps(), steps);
        for k in 0..steps {
            assert_eq!(part.depth[k].value(), full.depth[k].value());
        }
        let out = model.infer_steps(&sc.image, &sc.sparse, steps).unwrap();
        assert_eq!(out, full.depth[steps - 1].resize(32, 32).unwrap().value());
    }
    assert_eq!(model.infer_steps(&sc.image, &sc.sparse, SCALES).unwrap(), full.last().value());
}

#[test]
fn rejects_bad_inputs() {
    let model = LpNet::new(small_arch(4), 1).unwrap();
    let sc = scene(1, 32);
    assert!(model.infer_steps(&sc.image, &sc.sparse, 0).is_err());
    assert!(model.infer_steps(&sc.image, &sc.sparse, SCALES + 1).is_err());
    let odd = scene(1, 40);
    assert!(model.infer_steps(&odd.image, &odd.sparse, SCALES).is_err());
    let mismatched = SparseDepth::empty(1, 16, 16);
    assert!(model.infer_steps(&sc.image, &mismatched, SCALES).is_err());
    // four MFP paths need at least a 256-pixel side
    assert!(ArchConfig::default().check_input(64, 64).is_err());
    assert!(ArchConfig::default().check_input(256, 256).is_ok());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let model = LpNet::new(small_arch(4), 12).unwrap();
    let mut bytes = Vec::new();
    write_checkpoint(&model, &mut bytes).unwrap();
    let back = read_checkpoint(&mut bytes.as_slice()).unwrap();
    assert_eq!(back.config(), model.config());
    assert_eq!(back.params().names(), model.params().names());
    for (a, b) in back.params().tensors().iter().zip(model.params().tensors()) {
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    let mut again = Vec::new();
    write_checkpoint(&back, &mut again).unwrap();
    assert_eq!(bytes, again);

    let sc = scene(13, 32);
    assert_eq!(
        back.infer_steps(&sc.image, &sc.sparse, SCALES).unwrap(),
        model.infer_steps(&sc.image, &sc.sparse, SCALES).unwrap()
    );
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let model = LpNet::new(small_arch(4), 12).unwrap();
    let mut bytes = Vec::new();
    write_checkpoint(&model, &mut bytes).unwrap();
    assert!(read_checkpoint(&mut &bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(read_checkpoint(&mut bad.as_slice()).is_err());
    assert!(read_checkpoint(&mut &b""[..]).is_err());
}

#[test]
fn every_parameter_receives_gradient() {
    let model = LpNet::new(small_arch(4), 14).unwrap();
    let sc = scene(15, 32);
    let tape = Tape::new();
    let p = model.params().bind(&tape, true);
    let pyr = model.progressive_predict(&tape, &p, &sc.image, &sc.sparse, SCALES).unwrap();
    let (loss, _) = multiscale_loss(&pyr, &sc.ground_truth().unwrap(), None).unwrap();
    let g = tape.backward(&loss).unwrap();
    let missing: Vec<&String> = model
        .params()
        .names()
        .iter()
        .zip(p.vars())
        .filter(|(_, v)| !g.has(v))
        .map(|(n, _)| n)
        .collect();
    assert!(missing.is_empty(), "{missing:?}");
}

#[test]
fn arch_config_text_round_trip() {
    let a = ArchConfig {
        base_channels: 8,
        multipliers: [1, 2, 3, 4, 5],
        mfp_paths: 2,
        sdf_kernel: 5,
    };
    assert_eq!(ArchConfig::from_kv(&a.to_kv()).unwrap(), a);
    let mut b = ArchConfig::default();
    assert!(b.set("sdf_kernel", "4").is_err() || b.validate().is_err());
}
