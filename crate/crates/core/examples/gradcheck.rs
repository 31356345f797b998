//! Scratch harness: finite-difference check of the full batch loss with
//! respect to a sample of entries of every parameter tensor.

use ndarray::Array3;
use ssankit_core::autodiff::Tape;
use ssankit_core::config::RunConfig;
use ssankit_core::data::TokenizedCaption;
use ssankit_core::losses::{total_loss, BatchInputs};
use ssankit_core::model::Model;

fn batch_loss(model: &Model, images: &[Array3<f64>], caps: &[TokenizedCaption], cfg: &RunConfig) -> f64 {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let visual: Vec<_> = images
        .iter()
        .map(|im| model.forward_visual(&mut tape, &vars, im).unwrap())
        .collect();
    let text: Vec<_> = caps
        .iter()
        .map(|c| model.forward_text(&mut tape, &vars, c).unwrap().0)
        .collect();
    let labels = vec![0usize, 0, 1, 1];
    let ids = vec![0u32, 0, 1, 1];
    let companions = vec![1usize, 0, 3, 2];
    let batch = BatchInputs {
        visual: &visual,
        text: &text,
        labels: &labels,
        identities: &ids,
        companions: &companions,
    };
    let (_, breakdown) = total_loss(&mut tape, &batch, &vars, &cfg.loss, 0).unwrap();
    breakdown.total
}

fn main() {
    let mut cfg = RunConfig::tiny(3, 2);
    if let Ok(beta) = std::env::var("GC_BETA") {
        cfg.loss.beta = beta.parse().unwrap();
    }
    let mut model = Model::new(cfg.model.clone(), 2, 12, 3).unwrap();
    let images: Vec<Array3<f64>> = (0..4)
        .map(|i| {
            Array3::from_shape_fn((3, 96, 32), |(c, h, w)| {
                (((c * 31 + h * 7 + w * 3 + i * 13) % 17) as f64) / 17.0 - 0.5
            })
        })
        .collect();
    let caps: Vec<TokenizedCaption> = [[2usize, 4, 6, 8], [3, 5, 7, 9], [2, 5, 8, 11], [3, 4, 9, 10]]
        .iter()
        .map(|ids| TokenizedCaption {
            ids: ids.to_vec(),
            tokens: ids.iter().map(|i| format!("w{i}")).collect(),
        })
        .collect();

    // analytic gradients
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let visual: Vec<_> = images
        .iter()
        .map(|im| model.forward_visual(&mut tape, &vars, im).unwrap())
        .collect();
    let text: Vec<_> = caps
        .iter()
        .map(|c| model.forward_text(&mut tape, &vars, c).unwrap().0)
        .collect();
    let labels = vec![0usize, 0, 1, 1];
    let ids = vec![0u32, 0, 1, 1];
    let companions = vec![1usize, 0, 3, 2];
    let batch = BatchInputs {
        visual: &visual,
        text: &text,
        labels: &labels,
        identities: &ids,
        companions: &companions,
    };
    let (obj, _) = total_loss(&mut tape, &batch, &vars, &cfg.loss, 0).unwrap();
    let grads = tape.backward(obj);
    let named = model.collect_gradients(&vars, &grads);

    let step = 1e-5;
    let mut worst: (String, f64) = (String::new(), 0.0);
    let keys: Vec<String> = model.params.keys().cloned().collect();
    for name in keys {
        let len = model.params[&name].len();
        for probe in 0..3.min(len) {
            let idx = (probe * 97) % len;
            let orig = model.params.get_mut(&name).unwrap().as_slice_mut().unwrap()[idx];
            model.params.get_mut(&name).unwrap().as_slice_mut().unwrap()[idx] = orig + step;
            let plus = batch_loss(&model, &images, &caps, &cfg);
            model.params.get_mut(&name).unwrap().as_slice_mut().unwrap()[idx] = orig - step;
            let minus = batch_loss(&model, &images, &caps, &cfg);
            model.params.get_mut(&name).unwrap().as_slice_mut().unwrap()[idx] = orig;
            let fd = (plus - minus) / (2.0 * step);
            let an = named[&name].as_slice().unwrap()[idx];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
            if rel > worst.1 && (an.abs() > 1e-7 || fd.abs() > 1e-7) {
                worst = (format!("{name}[{idx}] an={an:.3e} fd={fd:.3e}"), rel);
            }
        }
    }
    println!("worst relative error: {} -> {:.3e}", worst.0, worst.1);
}
