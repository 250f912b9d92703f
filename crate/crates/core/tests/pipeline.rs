use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use imagetar_core::ann::{exact_knn, AnnIndex, AnnParams, EXHAUSTIVE};
use imagetar_core::embedding::{
    embed_all, propagate_vectors, read_vectors_file, representative_items, to_vector_set,
    write_vectors_file, Normalize, ReferenceEmbedder,
};
use imagetar_core::ingest::{
    deduplicate, exclude_high_frequency, manifest_totals, read_manifest_file, scan_corpus,
    tally_frequencies, write_manifest_file, ExclusionRule, ScanOptions,
};
use imagetar_core::kmeans::{
    assign, kmeans_fit, read_model_file, summarize_clusters, write_model_file, KMeansParams,
};

/// Two colour families of 12 images each, a "logo" copied 5 times, one
/// other duplicate and one unreadable file.
fn corpus(root: &Path) {
    fs::create_dir_all(root.join("red")).unwrap();
    fs::create_dir_all(root.join("blue")).unwrap();
    for i in 0..12u32 {
        let red = RgbImage::from_fn(16, 16, |x, y| Rgb([200 + (i % 5) as u8, (x + i) as u8, y as u8]));
        red.save(root.join(format!("red/{i:02}.png"))).unwrap();
        let blue = RgbImage::from_fn(16, 16, |x, y| Rgb([y as u8, (x * i) as u8, 220 - i as u8]));
        blue.save(root.join(format!("blue/{i:02}.png"))).unwrap();
    }
    let logo = RgbImage::from_pixel(16, 16, Rgb([10, 200, 10]));
    for i in 0..5 {
        logo.save(root.join(format!("logo{i}.png"))).unwrap();
    }
    fs::copy(root.join("red/00.png"), root.join("red-copy.png")).unwrap();
    fs::write(root.join("broken.png"), b"\x89PNG garbage").unwrap();
}

#[test]
fn scan_to_clusters_and_neighbors() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("corpus");
    corpus(&root);

    let records = scan_corpus(&root, &ScanOptions::default()).unwrap();
    assert_eq!(records.len(), 31);
    let groups = deduplicate(&records);
    assert_eq!(groups.len(), 25);
    assert_eq!(groups[0].frequency, 5);
    let tally = tally_frequencies(&groups, &records);
    assert_eq!(tally.rows[0].frequency, 5);
    assert_eq!(tally.rows[1].frequency, 2);

    let records = exclude_high_frequency(&groups, &records, &ExclusionRule::MinFrequency(3)).unwrap();
    let t = manifest_totals(&records);
    assert_eq!((t.total, t.clusterable, t.high_frequency, t.invalid), (31, 25, 5, 1));

    // manifest round trip
    let manifest = dir.path().join("manifest.jsonl");
    write_manifest_file(&records, &manifest).unwrap();
    assert_eq!(read_manifest_file(&manifest).unwrap(), records);

    let items = representative_items(&records, &groups, &root);
    assert_eq!(items.len(), 24);
    let embedder = ReferenceEmbedder::new(64, Normalize::L2).unwrap();
    let result = embed_all(&items, &embedder, 5);
    assert!(result.failed.is_empty());
    let vectors = to_vector_set(&items, &result, 64).unwrap();
    let fvec = dir.path().join("vectors.fvec");
    write_vectors_file(&vectors, &fvec).unwrap();
    assert_eq!(read_vectors_file(&fvec).unwrap(), vectors);

    let rep_rows: HashMap<String, usize> = (0..vectors.len())
        .map(|row| (records[vectors.ordinal(row) as usize].image_id.clone(), row))
        .collect();
    let mapping = propagate_vectors(&groups, &records, &rep_rows, &HashSet::new()).unwrap();
    assert_eq!(mapping.len(), 25);

    let model = kmeans_fit(&vectors, &KMeansParams::new(2, 3)).unwrap();
    let path = dir.path().join("model.kmeans");
    write_model_file(&model, &path).unwrap();
    let reloaded = read_model_file(&path).unwrap();
    assert_eq!(reloaded.assignments, model.assignments);
    assert_eq!(reloaded.centroids, model.centroids);

    // the two colour families separate
    let cluster_of_path = |prefix: &str| -> HashSet<usize> {
        (0..vectors.len())
            .filter(|row| records[vectors.ordinal(*row) as usize].path.starts_with(prefix))
            .map(|row| assign(&model, vectors.row(row)).unwrap())
            .collect()
    };
    let red = cluster_of_path("red/");
    let blue = cluster_of_path("blue/");
    assert_eq!(red.len(), 1);
    assert_eq!(blue.len(), 1);
    assert_ne!(red, blue);

    let summaries = summarize_clusters(&model, &vectors, &records, &groups, 25);
    let sizes: usize = summaries.iter().map(|s| s.size_total_images).sum();
    assert_eq!(sizes, t.clusterable);

    let index = AnnIndex::build(&vectors, &AnnParams::default()).unwrap();
    for row in 0..vectors.len() {
        assert_eq!(
            index.query_row(&vectors, row, 5, EXHAUSTIVE).unwrap(),
            exact_knn(&vectors, row, 5).unwrap()
        );
    }
}
