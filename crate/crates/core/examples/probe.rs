//! Scratch harness: train the tiny config on the synthetic corpus and print
//! per-epoch loss plus final retrieval metrics.

use ssankit_core::data::synthetic::{generate_synthetic, SyntheticSpec};
use ssankit_core::data::build_vocabulary;
use ssankit_core::{evaluate, train, RunConfig};

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let epochs: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(30);
    let start = std::time::Instant::now();
    let n_ids: usize = std::env::var("PROBE_IDS").ok().and_then(|s| s.parse().ok()).unwrap_or(40);
    let data_seed: u64 =
        std::env::var("PROBE_DATA_SEED").ok().and_then(|s| s.parse().ok()).unwrap_or(7);
    let mut spec = SyntheticSpec::tiny_benchmark(data_seed);
    spec.train_identities = n_ids;
    spec.test_identities = (n_ids / 4).max(1);
    if let Ok(c) = std::env::var("PROBE_CAPS") {
        spec.captions_per_image = c.parse().unwrap();
    }
    if let Ok(j) = std::env::var("PROBE_JITTER") {
        spec.jitter_strength = j.parse().unwrap();
    }
    if let Ok(s) = std::env::var("PROBE_SIZE") {
        let (h, w) = s.split_once('x').unwrap();
        spec.image_size = (h.parse().unwrap(), w.parse().unwrap());
    }
    let (train_recs, test_recs) = generate_synthetic(&spec).unwrap();
    let vocab = build_vocabulary(&train_recs, 1, 32).unwrap();
    let mut config = RunConfig::tiny(seed, n_ids);
    config.model.visual.input_size = spec.image_size;
    config.train.epochs = epochs;
    if let Ok(lr) = std::env::var("PROBE_LR") {
        config.train.learning_rate = lr.parse().unwrap();
    }
    if let Ok(de) = std::env::var("PROBE_DECAY") {
        config.train.decay_epoch = de.parse().unwrap();
    }
    if let Ok(v) = std::env::var("PROBE_EMBED") {
        config.model.embed_dim = v.parse().unwrap();
    }
    if let Ok(r) = std::env::var("PROBE_REL") {
        config.train.relation_lr_scale = r.parse().unwrap();
    }
    if let Ok(w) = std::env::var("PROBE_WAMLR") {
        config.train.wam_lr_scale = w.parse().unwrap();
    }
    if let Ok(w) = std::env::var("PROBE_WARM") {
        config.train.warmup_epochs = w.parse().unwrap();
    }
    if let Ok(sw) = std::env::var("PROBE_STREAMS") {
        let parts: Vec<f64> = sw.split(',').map(|x| x.parse().unwrap()).collect();
        config.loss.stream_weights = (parts[0], parts[1], parts[2]);
    }
    if let Ok(q) = std::env::var("PROBE_Q") {
        config.train.images_per_identity = q.parse().unwrap();
    }
    if let Ok(c) = std::env::var("PROBE_CLIP") {
        config.train.grad_clip = if c == "none" { None } else { Some(c.parse().unwrap()) };
    }
    let dir = tempfile::tempdir().unwrap();
    let outcome = train(&config, &train_recs, &vocab, dir.path(), false).unwrap();
    for s in &outcome.history {
        if s.epoch % 5 == 0 || s.epoch == 1 {
            println!("epoch {:2} loss {:.4} lr {}", s.epoch, s.mean_loss, s.learning_rate);
        }
    }
    let log = std::fs::read_to_string(dir.path().join("train-log.jsonl")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    println!("first step: {}", lines.first().unwrap());
    println!("last step:  {}", lines.last().unwrap());
    let ckpt = ssankit_core::checkpoint::Checkpoint::load(&outcome.checkpoint_dir).unwrap();
    if std::env::var("PROBE_TRAIN_EVAL").is_ok() {
        let r = evaluate(&ckpt.model, &ckpt.vocab, &train_recs, None).unwrap();
        println!(
            "train split: rank1 {:.3} rank5 {:.3} (streams {:.3}/{:.3}/{:.3})",
            r.rank1, r.rank5, r.streams.global.rank1, r.streams.global_parts.rank1, r.streams.full.rank1
        );
    }
    if std::env::var("PROBE_STREAM_STATS").is_ok() {
        let gallery = ssankit_core::eval::build_gallery(&ckpt.model, &test_recs, None).unwrap();
        let queries =
            ssankit_core::eval::build_queries(&ckpt.model, &ckpt.vocab, &test_recs, None).unwrap();
        for (name, pick) in [
            ("global", 0usize),
            ("parts", 1),
            ("relations", 2),
        ] {
            let (mut pos, mut neg, mut np, mut nn) = (0.0, 0.0, 0usize, 0usize);
            let (mut pos2, mut neg2) = (0.0, 0.0);
            for (qi, q) in queries.bundles.iter().enumerate() {
                for (gi, g) in gallery.bundles.iter().enumerate() {
                    let t = q.similarity(g).unwrap();
                    let s = match pick {
                        0 => t.global,
                        1 => t.parts,
                        _ => t.relations,
                    };
                    if queries.identities[qi] == gallery.identities[gi] {
                        pos += s;
                        pos2 += s * s;
                        np += 1;
                    } else {
                        neg += s;
                        neg2 += s * s;
                        nn += 1;
                    }
                }
            }
            let (mp, mn) = (pos / np as f64, neg / nn as f64);
            let (sp, sn) = (
                (pos2 / np as f64 - mp * mp).sqrt(),
                (neg2 / nn as f64 - mn * mn).sqrt(),
            );
            println!("{name}: pos {mp:.3}±{sp:.3}  neg {mn:.3}±{sn:.3}  gap {:.3}", mp - mn);
        }
    }
    if std::env::var("PROBE_WAM").is_ok() {
        let head = ["hat", "cap"];
        let feet = ["shoes", "boots"];
        // argmax-band histograms: [head-adj, head-noun, feet-adj, feet-noun]
        let mut hist = [[0usize; 8]; 4];
        let (mut head_ok, mut feet_ok, mut total) = (0usize, 0usize, 0usize);
        for rec in &test_recs {
            for cap in &rec.captions {
                let rep = ssankit_core::eval::wam_inspect(&ckpt.model, &ckpt.vocab, cap).unwrap();
                let k = rep.scores.len();
                let argmax = |j: usize| {
                    (0..k).max_by(|&a, &b| rep.scores[a][j].partial_cmp(&rep.scores[b][j]).unwrap()).unwrap()
                };
                let mut h_hit = true;
                let mut f_hit = true;
                for (j, tok) in rep.tokens.iter().enumerate() {
                    if head.contains(&tok.as_str()) {
                        hist[1][argmax(j)] += 1;
                        if j > 0 {
                            hist[0][argmax(j - 1)] += 1;
                        }
                        if argmax(j) != 0 {
                            h_hit = false;
                        }
                    }
                    if feet.contains(&tok.as_str()) {
                        hist[3][argmax(j)] += 1;
                        if j > 0 {
                            hist[2][argmax(j - 1)] += 1;
                        }
                        if argmax(j) != k - 1 {
                            f_hit = false;
                        }
                    }
                }
                head_ok += h_hit as usize;
                feet_ok += f_hit as usize;
                total += 1;
            }
        }
        println!(
            "wam: head {:.3} feet {:.3} ({} captions)",
            head_ok as f64 / total as f64,
            feet_ok as f64 / total as f64,
            total
        );
        for (name, h) in ["head-adj", "head-noun", "feet-adj", "feet-noun"].iter().zip(hist) {
            println!("  {name}: {:?}", &h[..3]);
        }
    }
    let report = evaluate(&ckpt.model, &ckpt.vocab, &test_recs, None).unwrap();
    println!(
        "seed {seed}: rank1 {:.3} rank5 {:.3} rank10 {:.3} ({} queries) in {:.1}s",
        report.rank1,
        report.rank5,
        report.rank10,
        report.num_queries,
        start.elapsed().as_secs_f64()
    );
    println!(
        "streams: global {:.3} / +parts {:.3} / full {:.3}",
        report.streams.global.rank1, report.streams.global_parts.rank1, report.streams.full.rank1
    );
}
