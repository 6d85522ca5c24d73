use super::*;
use crate::rng::substream;
use crate::tensor::{gradcheck, CoordSampling, Tape, Var};
use rand::Rng;

fn rand_image<T: Scalar>(size: u32, seed: u64) -> Tensor<T> {
    let mut rng = substream(seed, "img");
    let n = 3 * (size * size) as usize;
    Tensor::new(
        vec![3, size as usize, size as usize],
        (0..n).map(|_| T::from_f64(rng.gen_range(0.0..1.0))).collect(),
    )
    .unwrap()
}

fn rand_pixels(size: u32, n: usize, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = substream(seed, "px");
    (0..n)
        .map(|_| [rng.gen_range(0.5..size as f64 - 0.5), rng.gen_range(0.5..size as f64 - 0.5)])
        .collect()
}

#[test]
fn desk_encode_shapes() {
    let net = Network::<f32>::init(NetworkConfig::desk(), 1).unwrap();
    let mut tape = Tape::new();
    let vars = net.bind_frozen(&mut tape);
    let (z, c) = net.encode(&mut tape, &vars, &rand_image(64, 1)).unwrap();
    assert_eq!(tape.value(z).shape(), &[1, 64]);
    assert_eq!(tape.value(c).shape(), &[64, 32, 32]);
}

#[test]
fn paper_encode_shapes_and_concat_width() {
    let cfg = NetworkConfig::paper();
    assert_eq!(cfg.concat_width(), 512);
    assert_eq!(cfg.d_local, 256);
    let net = Network::<f32>::init(cfg, 1).unwrap();
    let mut tape = Tape::new();
    let vars = net.bind_frozen(&mut tape);
    let (z, c) = net.encode(&mut tape, &vars, &rand_image(224, 2)).unwrap();
    assert_eq!(tape.value(z).shape(), &[1, 256]);
    assert_eq!(tape.value(c).shape(), &[256, 112, 112]);
}

#[test]
fn param_counts_match_presets() {
    let desk = Network::<f32>::init(NetworkConfig::desk(), 1).unwrap();
    assert!(desk.param_count() < 2_000_000, "desk params {}", desk.param_count());

    let paper = Network::<f32>::init(NetworkConfig::paper(), 1).unwrap();
    let count = paper.param_count() as f64;
    let reference = 14_100_000.0;
    assert!(
        (count - reference).abs() / reference < 0.20,
        "paper params {count} not within 20% of {reference}"
    );
}

#[test]
fn encode_is_deterministic_across_calls() {
    let net = Network::<f32>::init(NetworkConfig::desk(), 3).unwrap();
    let img = rand_image(64, 5);
    let run = || {
        let mut tape = Tape::new();
        let vars = net.bind_frozen(&mut tape);
        let (z, c) = net.encode(&mut tape, &vars, &img).unwrap();
        (tape.value(z).data().to_vec(), tape.value(c).data().to_vec())
    };
    let (z1, c1) = run();
    let (z2, c2) = run();
    assert!(z1.iter().zip(&z2).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert!(c1.iter().zip(&c2).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn local_feature_sampling_reproduces_cells_and_constants() {
    let net = Network::<f32>::init(NetworkConfig::desk(), 4).unwrap();
    let mut tape = Tape::<f32>::new();
    // hand-made 64x32x32 map: channel pattern distinguishable per cell
    let mut data = vec![0.0f32; 64 * 32 * 32];
    for ch in 0..64 {
        for i in 0..32 * 32 {
            data[ch * 1024 + i] = (ch * 7) as f32 + i as f32 * 0.01;
        }
    }
    let c = tape.constant(Tensor::new(vec![64, 32, 32], data.clone()).unwrap());

    // feature cell (3, 5) center in image coords: ((3+0.5)*2, (5+0.5)*2)
    let sampled = net.sample_local_feature(&mut tape, c, &[[7.0, 11.0]]).unwrap();
    let got = tape.value(sampled);
    for ch in 0..64 {
        let want = data[ch * 1024 + 5 * 32 + 3];
        assert!((got.data()[ch] - want).abs() < 1e-5);
    }

    // constant map -> constant feature anywhere
    let c_const = tape.constant(Tensor::full(vec![64, 32, 32], 0.37f32));
    let s2 = net
        .sample_local_feature(&mut tape, c_const, &[[1.3, 60.2], [33.0, 5.5]])
        .unwrap();
    for &v in tape.value(s2).data() {
        assert!((v - 0.37).abs() < 1e-6);
    }

    // midpoint between horizontally adjacent cells -> arithmetic mean
    let mid = net.sample_local_feature(&mut tape, c, &[[8.0, 11.0]]).unwrap();
    let got = tape.value(mid);
    for ch in 0..64 {
        let a = data[ch * 1024 + 5 * 32 + 3];
        let b = data[ch * 1024 + 5 * 32 + 4];
        assert!((got.data()[ch] - (a + b) / 2.0).abs() < 1e-4);
    }

    assert!(net.sample_local_feature(&mut tape, c, &[[65.0, 0.0]]).is_err());
}

#[test]
fn mixer_output_width_and_residual_identity() {
    let mut net = Network::<f64>::init(NetworkConfig::desk(), 5).unwrap();
    // zero every residual-branch final layer: blocks become identity and
    // the mixer reduces to its input projection
    for i in 0..net.config.mixer_blocks {
        for field in ["w", "b"] {
            let idx = net.param_index(&format!("mixer.block{i}.fc2.{field}")).unwrap();
            let shape = net.params[idx].1.shape().to_vec();
            net.params[idx].1 = Tensor::zeros(shape);
        }
    }
    let mut tape = Tape::new();
    let vars = net.bind_frozen(&mut tape);
    let mut rng = substream(6, "mix");
    let cp_t = Tensor::new(vec![3, 64], (0..192).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let c_p = tape.constant(cp_t);
    let pixels = rand_pixels(64, 3, 6);
    let p_norm = net.normalize_pixels(&pixels);
    let y = net.mix(&mut tape, &vars, &p_norm, c_p).unwrap();
    assert_eq!(tape.value(y).shape(), &[3, 64]);

    // reference: input projection only
    let joined = {
        let p = tape.constant(p_norm.clone());
        let cp2 = tape.value(c_p).clone();
        let cp2 = tape.constant(cp2);
        tape.concat(&[p, cp2], 1).unwrap()
    };
    let proj = tape
        .fully_connected(joined, vars[net.layout.mixer_input.w], vars[net.layout.mixer_input.b])
        .unwrap();
    for (a, b) in tape.value(y).data().iter().zip(tape.value(proj).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn mixer_rows_are_independent() {
    let net = Network::<f64>::init(NetworkConfig::desk(), 7).unwrap();
    let pixels = rand_pixels(64, 5, 7);
    let img = rand_image(64, 7);
    let run = |subset: &[usize]| -> Vec<f64> {
        let mut tape = Tape::new();
        let vars = net.bind_frozen(&mut tape);
        let (_, c) = net.encode(&mut tape, &vars, &img).unwrap();
        let px: Vec<[f64; 2]> = subset.iter().map(|&i| pixels[i]).collect();
        let c_p = net.sample_local_feature(&mut tape, c, &px).unwrap();
        let p_norm = net.normalize_pixels(&px);
        let y = net.mix(&mut tape, &vars, &p_norm, c_p).unwrap();
        tape.value(y).data().to_vec()
    };
    let full = run(&[0, 1, 2, 3, 4]);
    let pair = run(&[3, 1]);
    let h = net.config.hidden;
    assert_eq!(&full[3 * h..4 * h], &pair[0..h]);
    assert_eq!(&full[h..2 * h], &pair[h..2 * h]);
}

#[test]
fn decode_emits_m_logits_and_is_rowwise_deterministic() {
    let net = Network::<f32>::init(NetworkConfig::desk(), 8).unwrap();
    let mut tape = Tape::new();
    let vars = net.bind_frozen(&mut tape);
    let mut rng = substream(8, "dec");
    let row: Vec<f32> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut data = row.clone();
    data.extend_from_slice(&row); // two identical rays
    let y = tape.constant(Tensor::new(vec![2, 64], data).unwrap());
    let z = tape.constant(Tensor::full(vec![1, 64], 0.3f32));
    let cond = net.make_cond(&mut tape, z, 1.4, Ablation::default()).unwrap();
    let logits = net.decode(&mut tape, &vars, y, cond, NormMode::Eval, None).unwrap();
    let v = tape.value(logits);
    assert_eq!(v.shape(), &[2, 32]);
    assert_eq!(&v.data()[0..32], &v.data()[32..64]);
}

#[test]
fn scale_input_changes_logits() {
    // finite-difference probe on s at random init
    let net = Network::<f64>::init(NetworkConfig::desk(), 9).unwrap();
    let img = rand_image(64, 9);
    let pixels = rand_pixels(64, 4, 9);
    let f = |s: f64| {
        net.infer_rays(&img, &pixels, s, Ablation::default())
            .unwrap()
            .data()
            .to_vec()
    };
    let (lo, hi) = (f(1.2), f(1.2 + 1e-4));
    let max_ds = lo
        .iter()
        .zip(&hi)
        .map(|(a, b)| ((b - a) / 1e-4).abs())
        .fold(0.0f64, f64::max);
    assert!(max_ds > 1e-4, "logits must depend on s, max |d/ds| = {max_ds}");
}

#[test]
fn ablated_scale_makes_output_independent_of_s() {
    let net = Network::<f32>::init(NetworkConfig::desk(), 10).unwrap();
    let img = rand_image(64, 10);
    let pixels = rand_pixels(64, 6, 10);
    let ab = Ablation { use_scale: false, ..Default::default() };
    let a = net.infer_rays(&img, &pixels, 1.0, ab).unwrap();
    let b = net.infer_rays(&img, &pixels, 1.7, ab).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn full_forward_shape_and_permutation_equivariance() {
    let net = Network::<f32>::init(NetworkConfig::desk(), 11).unwrap();
    let img = rand_image(64, 11);
    let pixels = rand_pixels(64, 7, 11);
    let out = net.infer_rays(&img, &pixels, 1.4, Ablation::default()).unwrap();
    assert_eq!(out.shape(), &[7, 32]);

    let perm = [4usize, 0, 6, 2, 5, 1, 3];
    let permuted: Vec<[f64; 2]> = perm.iter().map(|&i| pixels[i]).collect();
    let out_p = net.infer_rays(&img, &permuted, 1.4, Ablation::default()).unwrap();
    for (row, &src) in perm.iter().enumerate() {
        assert_eq!(
            &out_p.data()[row * 32..(row + 1) * 32],
            &out.data()[src * 32..(src + 1) * 32]
        );
    }
}

#[test]
fn inference_is_independent_of_batch_composition() {
    // running statistics, not batch statistics: a ray's logits cannot
    // depend on which other rays share the batch
    let net = Network::<f32>::init(NetworkConfig::desk(), 12).unwrap();
    let img = rand_image(64, 12);
    let pixels = rand_pixels(64, 5, 12);
    let all = net.infer_rays(&img, &pixels, 1.4, Ablation::default()).unwrap();
    let solo = net.infer_rays(&img, &pixels[2..3], 1.4, Ablation::default()).unwrap();
    assert_eq!(&all.data()[2 * 32..3 * 32], solo.data());
}

#[test]
fn decoder_forward_counters_count_rays() {
    let _guard = counters::exclusive();
    let net = Network::<f32>::init(NetworkConfig::desk(), 13).unwrap();
    let img = rand_image(64, 13);
    let pixels = rand_pixels(64, 9, 13);
    counters::reset();
    let _ = net.infer_rays(&img, &pixels, 1.4, Ablation::default()).unwrap();
    assert_eq!(counters::decoder_forwards(), 9);
    assert_eq!(counters::encoder_forwards(), 1);
}

#[test]
fn decoder_work_scales_linearly_with_m_encoder_does_not() {
    let flops_for = |m: usize| -> (u64, u64) {
        let mut cfg = NetworkConfig::desk();
        cfg.m = m;
        let net = Network::<f64>::init(cfg, 14).unwrap();
        let img = rand_image(64, 14);
        let pixels = rand_pixels(64, 8, 14);

        let mut tape = Tape::new();
        let vars = net.bind_frozen(&mut tape);
        let (z, _c) = net.encode(&mut tape, &vars, &img).unwrap();
        let encoder_flops = tape.flops();

        let c_p = tape.constant(Tensor::zeros(vec![pixels.len(), 64]));
        let p_norm = net.normalize_pixels(&pixels);
        let y = net.mix(&mut tape, &vars, &p_norm, c_p).unwrap();
        let cond = net.make_cond(&mut tape, z, 1.4, Ablation::default()).unwrap();
        let before = tape.flops();
        let _ = net.decode(&mut tape, &vars, y, cond, NormMode::Eval, None).unwrap();
        (encoder_flops, tape.flops() - before)
    };
    let (enc_a, dec_a) = flops_for(32);
    let (enc_b, dec_b) = flops_for(64);
    let (enc_c, dec_c) = flops_for(128);
    assert_eq!(enc_a, enc_b);
    assert_eq!(enc_b, enc_c);
    // decoder flop growth per extra M output is constant (final layer only)
    let d1 = dec_b - dec_a;
    let d2 = dec_c - dec_b;
    assert_eq!(d2, 2 * d1, "decoder flops must grow linearly in M");
    assert!(dec_a > 0);
}

#[test]
fn checkpoint_round_trip_preserves_forward_bits() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.ronw");
    let mut net = Network::<f32>::init(NetworkConfig::desk(), 15).unwrap();
    // make running stats non-trivial so buffers are exercised
    for (_, buf) in net.buffers.iter_mut() {
        for (i, v) in buf.data_mut().iter_mut().enumerate() {
            *v += 0.01 * (i % 7) as f32;
        }
    }
    let img = rand_image(64, 15);
    let pixels = rand_pixels(64, 5, 15);
    let before = net.infer_rays(&img, &pixels, 1.3, Ablation::default()).unwrap();

    net.save_checkpoint(&path).unwrap();
    let mut restored = Network::<f32>::init(NetworkConfig::desk(), 999).unwrap();
    restored.load_weights(&path).unwrap();
    let after = restored.infer_rays(&img, &pixels, 1.3, Ablation::default()).unwrap();
    assert!(before
        .data()
        .iter()
        .zip(after.data())
        .all(|(a, b)| a.to_bits() == b.to_bits()));
}

/// End-to-end gradient fidelity on a small desk-style network: every
/// layer participates, batch statistics frozen, double precision.
#[test]
fn full_network_gradcheck() {
    let mut cfg = NetworkConfig::desk();
    cfg.image_size = 16;
    cfg.m = 8;
    let net = Network::<f64>::init(cfg, 16).unwrap();
    let img = rand_image(16, 16);
    let pixels = vec![[4.2, 9.7], [12.0, 3.3]];
    let targets = Tensor::new(vec![2, 8], vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();

    let params: Vec<Tensor<f64>> = net.params.iter().map(|(_, t)| t.clone()).collect();
    let f = |tape: &mut Tape<f64>, vars: &[Var]| {
        let logits = net.full_forward_on_tape(
            tape,
            vars,
            &img,
            &pixels,
            1.4,
            NormMode::Eval,
            Ablation::default(),
            None,
        )?;
        tape.bce_with_logits(logits, &targets)
    };
    let report = gradcheck(&f, &params, 1e-4, CoordSampling::PerTensor { max: 6, seed: 99 }).unwrap();
    assert!(
        report.max_rel_err < 1e-4,
        "max rel err {} at {:?}",
        report.max_rel_err,
        report.worst
    );
    assert!(report.coords_checked > 200);
}
