use competency_core::config::RunConfig;
use competency_core::pipeline::run_benchmark;
use competency_core::segmentation::felzenszwalb_segment;
use competency_core::synthetic::generate_synthetic;
use competency_core::perception::Split;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut config = RunConfig::default();
    config.run.seed = seed;
    config.classifier.epochs = 10;
    config.inpainter.epochs = 12;
    config.run.threads = 2;

    // Segmentation diagnostics on the synthetic data.
    let data = generate_synthetic::<f32>(&config.dataset.synthetic.to_spec(seed)).unwrap();
    let test_idx = data.indices_of(Split::Test);
    let mut nseg_sum = 0usize;
    let mut purity_sum = 0.0;
    let mut t_seg = 0.0;
    for &i in test_idx.iter().take(12) {
        let t0 = Instant::now();
        let seg = felzenszwalb_segment(&data.images[i], &config.segmentation).unwrap();
        t_seg += t0.elapsed().as_secs_f64();
        nseg_sum += seg.n_segments;
        // patch isolation: fraction of patch pixels lying in segments that are >=60% patch
        let mask = data.masks[i].as_ref().unwrap();
        let mut seg_pos = vec![0usize; seg.n_segments];
        let mut seg_tot = vec![0usize; seg.n_segments];
        for (p, &l) in seg.labels.iter().enumerate() {
            seg_tot[l as usize] += 1;
            if mask[p] { seg_pos[l as usize] += 1; }
        }
        let mut good = 0usize;
        let total_pos: usize = mask.iter().filter(|&&b| b).count();
        for s in 0..seg.n_segments {
            if seg_tot[s] > 0 && seg_pos[s] * 10 >= seg_tot[s] * 6 {
                good += seg_pos[s];
            }
        }
        purity_sum += good as f64 / total_pos as f64;
    }
    println!("segments/image mean {:.1}, patch isolation {:.2}, felz time {:.1} ms/img",
        nseg_sum as f64 / 12.0, purity_sum / 12.0, 1000.0 * t_seg / 12.0);

    let t0 = Instant::now();
    let (report, runs, artifacts) = run_benchmark(&config).unwrap();
    println!("classifier train acc {:.3} holdout {:.3}", artifacts.train_accuracy, artifacts.holdout_accuracy);
    println!("inpainter loss trace: first {:.4} last {:.4}",
        artifacts.inpainter_loss_trace.first().unwrap_or(&0.0),
        artifacts.inpainter_loss_trace.last().unwrap_or(&0.0));
    for run in &runs {
        if let Some(f) = run.chosen_fill { println!("{}: fill {}", run.row.method, f.name()); }
    }
    println!("{}", report.text_table());
    println!("total wall {:.1}s", t0.elapsed().as_secs_f64());
}
