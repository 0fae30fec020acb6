use std::fs;
use std::path::Path;

use rhvae::checkpoint::{load_checkpoint, save_checkpoint, MANIFEST_FILE};
use rhvae::cluster::{cluster_table, embed, pairwise_distances, DistanceKind, DistanceMatrix};
use rhvae::data::{self, Dataset};
use rhvae::eval::{evaluate, reconstruct_grid};
use rhvae::geometry::{anisotropy_map, grid_distance_map, interpolate, volume_element_map, GridMetric, LatentGrid};
use rhvae::rng::{normal_tensor, stream, tag};
use rhvae::train::train_with;
use rhvae::ModelBundle;

use crate::config::{RunConfig, Source, Subset};
use crate::{CliError, Command};

type Result<T> = std::result::Result<T, CliError>;

pub fn run(command: Command, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.output).map_err(|e| CliError::io(&cfg.output, e))?;
    write(&cfg.output.join(format!("{}-config.json", command.name())), cfg.to_json())?;
    match command {
        Command::MakeShapes => make_shapes(cfg),
        Command::Train => train(cfg),
        Command::Eval => eval(cfg),
        Command::Interpolate => interpolate_cmd(cfg),
        Command::MetricMaps => metric_maps(cfg),
        Command::Generate => generate(cfg),
        Command::Cluster => cluster(cfg),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn load_bundle(cfg: &RunConfig) -> Result<ModelBundle> {
    let dir = cfg.checkpoint_dir();
    if !dir.join(MANIFEST_FILE).is_file() {
        return Err(CliError::MissingCheckpoint(dir));
    }
    Ok(load_checkpoint(&dir)?)
}

fn check_shape(bundle: &ModelBundle, data: &Dataset) -> Result<()> {
    if (bundle.height, bundle.width) != (data.height, data.width) {
        return Err(CliError::Config(format!(
            "checkpoint expects {}x{} images but the configured dataset has {}x{}",
            bundle.height, bundle.width, data.height, data.width
        )));
    }
    Ok(())
}

fn make_shapes(cfg: &RunConfig) -> Result<()> {
    if cfg.data.source != Source::Shapes {
        return Err(CliError::Config("make-shapes needs data.source = \"shapes\"".into()));
    }
    let ds = cfg.load_dataset()?;
    let images = cfg.output.join("shapes-images.idx");
    let labels = cfg.output.join("shapes-labels.idx");
    data::write_idx(&ds, &images, &labels)?;
    let mut preview = Vec::new();
    for c in 0..ds.num_classes() {
        let idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == c).take(10).collect();
        preview.extend_from_slice(&ds.subset(&idx).images);
    }
    data::write_pgm_grid(&preview, ds.height, ds.width, 10, &cfg.output.join("shapes-preview.pgm"))?;
    println!("wrote {} images ({}x{}) to {}", ds.len(), ds.height, ds.width, images.display());
    Ok(())
}

fn train(cfg: &RunConfig) -> Result<()> {
    let (_, train_set, test) = cfg.datasets()?;
    let tc = cfg.train_config();
    eprintln!(
        "training {} on {} images, validating on {}",
        tc.model.kind,
        train_set.len(),
        test.len()
    );
    let bundle = train_with(&train_set, &test, &tc, |r| {
        if r.epoch % 10 == 0 {
            eprintln!("epoch {:>4}  train {:>10.3}  val {:>10.3}", r.epoch, r.train_obj, r.val_obj);
        }
    })?;
    save_checkpoint(&bundle, &cfg.checkpoint_dir())?;
    write(&cfg.output.join("history.csv"), bundle.history_csv())?;
    println!(
        "best epoch {} with validation objective {:.3}; checkpoint in {}",
        bundle.best_epoch,
        bundle.best_val_obj(),
        cfg.checkpoint_dir().display()
    );
    Ok(())
}

fn eval(cfg: &RunConfig) -> Result<()> {
    let bundle = load_bundle(cfg)?;
    let (_, train_set, test) = cfg.datasets()?;
    check_shape(&bundle, &test)?;
    let r = evaluate(&bundle, &train_set, &test, cfg.eval.samples, cfg.eval.repeats, cfg.seed)?;
    write(&cfg.output.join("eval.csv"), r.csv())?;
    reconstruct_grid(&bundle.params, &test, 10, &cfg.output.join("reconstructions.pgm"))?;
    println!("{}: {:.2} ({:.2})", bundle.spec().kind, r.log_likelihood.mean, r.log_likelihood.std);
    println!("{r}");
    Ok(())
}

fn interpolate_cmd(cfg: &RunConfig) -> Result<()> {
    let bundle = load_bundle(cfg)?;
    let (_, train_set, _) = cfg.datasets()?;
    check_shape(&bundle, &train_set)?;
    let ic = &cfg.interpolate;
    let pairs = if ic.pairs.is_empty() {
        let first = |c: usize| (0..train_set.len()).find(|&i| train_set.labels[i] == c);
        match (first(0), first(train_set.num_classes() - 1)) {
            (Some(a), Some(b)) => vec![[a, b]],
            _ => return Err(CliError::Config("training set lacks the classes for a default pair".into())),
        }
    } else {
        ic.pairs.clone()
    };
    let mut summary = String::from("pair,from,to,mode,frames,length\n");
    for (p, &[a, b]) in pairs.iter().enumerate() {
        if a >= train_set.len() || b >= train_set.len() {
            return Err(CliError::Config(format!("interpolation pair {a},{b} outside the {} training images", train_set.len())));
        }
        for &mode in &ic.modes {
            let it = interpolate(&bundle, train_set.image(a), train_set.image(b), mode, &ic.geodesic, ic.every, cfg.seed)?;
            let frames = it.latent.shape()[0];
            let stem = format!("interp-{p}-{mode}");
            data::write_pgm_grid(
                it.frames.data(),
                bundle.height,
                bundle.width,
                frames,
                &cfg.output.join(format!("{stem}.pgm")),
            )?;
            let d = it.latent.shape()[1];
            let mut csv = (0..d).map(|k| format!("z{k}")).collect::<Vec<_>>().join(",") + "\n";
            for f in 0..frames {
                csv += &(it.latent.row(f).iter().map(f64::to_string).collect::<Vec<_>>().join(",") + "\n");
            }
            write(&cfg.output.join(format!("{stem}.csv")), csv)?;
            let length = it.length.map_or(String::new(), |l| l.to_string());
            summary += &format!("{p},{a},{b},{mode},{frames},{length}\n");
            println!("pair {p} ({a} -> {b}) {mode}: {frames} frames, length {length}");
        }
    }
    write(&cfg.output.join("interpolate.csv"), summary)
}

fn metric_maps(cfg: &RunConfig) -> Result<()> {
    let bundle = load_bundle(cfg)?;
    let field = bundle
        .field
        .as_ref()
        .ok_or_else(|| CliError::Config("metric maps need an RHVAE checkpoint".into()))?;
    let (_, train_set, _) = cfg.datasets()?;
    check_shape(&bundle, &train_set)?;
    let z = embed(&bundle, &train_set)?;
    let grid = LatentGrid::around(z.data(), cfg.maps.res)?;
    let volume = volume_element_map(field, &grid)?;
    let aniso = anisotropy_map(field, &grid)?;
    let src = cfg.maps.source_index;
    if src >= train_set.len() {
        return Err(CliError::Config(format!("maps.source_index {src} outside the {} training images", train_set.len())));
    }
    let metric = GridMetric::new(field, grid)?;
    let dist = grid_distance_map(&metric, z.row(src))?;
    for (name, r) in [("volume", &volume), ("anisotropy", &aniso), ("distance", &dist)] {
        r.write_pgm(&cfg.output.join(format!("{name}.pgm")))?;
        write(&cfg.output.join(format!("{name}.csv")), r.csv())?;
    }
    let mut csv = String::from("z0,z1,label\n");
    for i in 0..train_set.len() {
        let p = z.row(i);
        csv += &format!("{},{},{}\n", p[0], p[1], train_set.labels[i]);
    }
    write(&cfg.output.join("embedding.csv"), csv)?;
    println!("wrote {0}x{0} maps to {1}", cfg.maps.res, cfg.output.display());
    Ok(())
}

fn generate(cfg: &RunConfig) -> Result<()> {
    let bundle = load_bundle(cfg)?;
    let g = &cfg.generate;
    if g.samples == 0 || g.cols == 0 {
        return Err(CliError::Config("generate.samples and generate.cols must be positive".into()));
    }
    let d = bundle.spec().latent_dim;
    let z = normal_tensor(&mut stream(cfg.seed, tag::GENERATE, 0), &[g.samples, d]);
    let x = bundle.params.decode_values(&z)?;
    let path = cfg.output.join("samples.pgm");
    data::write_pgm_grid(x.data(), bundle.height, bundle.width, g.cols, &path)?;
    println!("wrote {} prior samples to {}", g.samples, path.display());
    Ok(())
}

fn cluster(cfg: &RunConfig) -> Result<()> {
    let bundle = load_bundle(cfg)?;
    let (full, train_set, test) = cfg.datasets()?;
    let data = match cfg.cluster.subset {
        Subset::All => full,
        Subset::Train => train_set,
        Subset::Test => test,
    };
    check_shape(&bundle, &data)?;
    let c = &cfg.cluster;
    let e = pairwise_distances(&bundle, &data, DistanceKind::Euclidean, c.res)?;
    let g = pairwise_distances(&bundle, &data, DistanceKind::Geodesic, c.res)?;
    for (name, m) in [("euclidean", &e), ("geodesic", &g)] {
        DistanceMatrix::save(m, &cfg.output.join(format!("distances-{name}.bin")))?;
    }
    let table = cluster_table(&e, &g, &data.labels, &c.seeds, c.max_iters)?;
    write(&cfg.output.join("cluster.csv"), table.csv())?;
    println!(
        "macro-F1 over {} seeds on {} images: euclidean {:.2}, geodesic {:.2}",
        c.seeds.len(),
        data.len(),
        table.mean_euclidean,
        table.mean_geodesic
    );
    Ok(())
}
