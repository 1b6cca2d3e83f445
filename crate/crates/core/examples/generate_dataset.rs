//! Generate a synthetic paired dataset, corrupt 40% of the training pairs
//! and write the splits as JSON.
//!
//! cargo run --release --example generate_dataset -- [out_dir]

use gsc::synthdata::{generate_splits, GenSpec, PairDataset};

fn main() -> gsc::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "out/example-data".into());
    let spec = GenSpec {
        n: 3000,
        seed: 7,
        ..GenSpec::default()
    };
    let (train, dev, test) = generate_splits(&spec, 500, 500, 0.4)?;

    println!("image dim {}, text dim {}", train.meta.dims.img, train.meta.dims.txt);
    for ds in [&train, &dev, &test] {
        println!("{:?}: {} pairs, {} noisy", ds.split_tag(), ds.len(), ds.noisy_count());
    }
    let wrong: Vec<usize> = (0..train.len()).filter(|&i| train.noise_mask[i]).take(5).collect();
    for i in wrong {
        println!(
            "  image {i} (cluster {}) is paired with text {} (cluster {})",
            train.cluster_ids[i],
            train.match_perm[i],
            train.cluster_ids[train.match_perm[i]]
        );
    }

    std::fs::create_dir_all(&out)?;
    for (name, ds) in [("train", &train), ("dev", &dev), ("test", &test)] {
        ds.save(format!("{out}/{name}.json"))?;
    }
    let back = PairDataset::load(format!("{out}/train.json"))?;
    assert_eq!(back.noise_mask, train.noise_mask);
    println!("wrote {out}/{{train,dev,test}}.json");
    Ok(())
}
