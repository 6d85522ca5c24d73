use rayocc::net::{image_to_tensor, Ablation, BufferUpdates, Network, NetworkConfig, NormMode};
use rayocc::shapes::load_dataset;
use rayocc::tensor::{Adam, AdamHyper, Tape, Tensor};
use rayocc::training::{make_batch, TrainConfig};
use std::time::Instant;

fn main() {
    let ds = load_dataset(std::path::Path::new("/tmp/overfit_data")).unwrap();
    let mut net = Network::<f32>::init(NetworkConfig::desk(), 0).unwrap();
    let mut adam = Adam::new(&net.param_shapes(), AdamHyper::default());
    let images: Vec<Tensor<f32>> = ds.views.iter().map(|v| image_to_tensor(&v.image)).collect();
    let cfg = TrainConfig { pixels_per_image: 1024, batch_images: 8, ..Default::default() };
    let mut rng = rayocc::rng::substream(0, "train");

    for iter in 0..3 {
        let batch = make_batch(&ds, &cfg, &mut rng).unwrap();
        let t0 = Instant::now();
        let mut tape = Tape::new();
        let vars = net.bind(&mut tape);
        let t_bind = t0.elapsed();

        let mut updates = BufferUpdates::new();
        let mut losses = Vec::new();
        for view in &batch.views {
            let logits = net.full_forward_on_tape(&mut tape, &vars, &images[view.view_index],
                &view.pixels, view.s, NormMode::Train, Ablation::default(), Some(&mut updates)).unwrap();
            let targets = Tensor::new(vec![view.pixels.len(), view.m],
                view.targets_bits.iter().map(|&b| b as f32).collect()).unwrap();
            losses.push(tape.bce_with_logits(logits, &targets).unwrap());
        }
        let mut total = losses[0];
        for &l in &losses[1..] { total = tape.add(total, l).unwrap(); }
        let loss = tape.scale(total, 1.0 / losses.len() as f32).unwrap();
        let t_fwd = t0.elapsed();

        tape.backward(loss).unwrap();
        let t_bwd = t0.elapsed();

        let grads: Vec<Option<Tensor<f32>>> = vars.iter().map(|&v| tape.grad_tensor(v)).collect();
        adam.step(&mut net.params, &grads).unwrap();
        net.apply_buffer_updates(&updates);
        let t_all = t0.elapsed();
        println!("iter {iter}: bind {:.0}ms fwd {:.0}ms bwd {:.0}ms adam+rest {:.0}ms total {:.0}ms ({} nodes, {:.2} GFLOP)",
            t_bind.as_secs_f64()*1e3,
            (t_fwd - t_bind).as_secs_f64()*1e3,
            (t_bwd - t_fwd).as_secs_f64()*1e3,
            (t_all - t_bwd).as_secs_f64()*1e3,
            t_all.as_secs_f64()*1e3,
            tape.len(), tape.flops() as f64 / 1e9);
    }
}
