use fics_core::data::make_rasterdigits;
use fics_core::fi::{gan_archs, train_cgan, InterventionConfig, TrainConfig, TrainSinks};

fn main() {
    let ds = make_rasterdigits(0.8, 4000, 7);
    let (ga, da) = gan_archs(ds.kind());
    let cfg = TrainConfig {
        gen_steps: 6000, n_dis: 5, log_every: 400, monitor_samples: 384,
        ..TrainConfig::default()
    };
    let sinks = TrainSinks { log_path: Some(std::path::Path::new("/tmp/raster_deep.csv")), snapshot_dir: None };
    let t0 = std::time::Instant::now();
    let _ = train_cgan(&ds, &InterventionConfig::none(), None, ga, da, &cfg, 1, &sinks).unwrap();
    println!("deep-G ndis5: 6000 steps in {:.0}s", t0.elapsed().as_secs_f64());
}
