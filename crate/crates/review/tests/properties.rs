use std::collections::{BTreeMap, HashMap, HashSet};

use chrono::{TimeZone, Utc};
use imagetar_core::ingest::{
    deduplicate, exclude_high_frequency, Exclusion, ExclusionRule, ImageRecord,
};
use imagetar_core::kmeans::ClusterSummary;
use imagetar_review::report::{build_report, ReportInputs};
use imagetar_review::{Label, ReportTotals, TagEvent, TagState};
use proptest::prelude::*;

const LABELS: [Label; 3] = [Label::Responsive, Label::NotResponsive, Label::FurtherReview];

fn event(seq: u64, round: u32, cluster: usize, label: usize) -> TagEvent {
    TagEvent {
        seq,
        round,
        cluster_index: cluster,
        label: LABELS[label],
        note: format!("note {seq}"),
        author: format!("r{}", seq % 3),
        timestamp: Utc.timestamp_opt(1_700_000_000 + seq as i64, 0).unwrap(),
    }
}

fn events() -> impl Strategy<Value = Vec<TagEvent>> {
    prop::collection::vec((1u32..3, 0usize..6, 0usize..3), 0..60).prop_map(|raw| {
        raw.into_iter()
            .enumerate()
            .map(|(i, (round, cluster, label))| event(i as u64 + 1, round, cluster, label))
            .collect()
    })
}

proptest! {
    #[test]
    fn replay_is_order_independent(evs in events(), order in any::<prop::sample::Index>(), seed in any::<u64>()) {
        let in_order = TagState::replay(&evs);
        let mut shuffled = evs.clone();
        // deterministic permutation from the generated seed
        let mut s = seed | 1;
        for i in (1..shuffled.len()).rev() {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            shuffled.swap(i, (s % (i as u64 + 1)) as usize);
        }
        if !shuffled.is_empty() {
            let j = order.index(shuffled.len());
            shuffled.rotate_left(j);
        }
        let reordered = TagState::replay(&shuffled);
        prop_assert_eq!(in_order.canonical_bytes(), reordered.canonical_bytes());

        let mut last: BTreeMap<(u32, usize), &TagEvent> = BTreeMap::new();
        for e in &evs {
            last.insert((e.round, e.cluster_index), e);
        }
        for ((round, cluster), e) in last {
            prop_assert_eq!(in_order.label(round, cluster), e.label);
        }
        prop_assert_eq!(in_order.label(9, 0), Label::Untagged);
    }
}

fn record(i: usize, hash: usize, invalid: bool) -> ImageRecord {
    let content_hash = format!("{hash:064x}");
    ImageRecord {
        image_id: format!("img{i:04}"),
        path: format!("f{i:04}.png"),
        byte_size: 10,
        dedup_group_id: (!invalid).then(|| content_hash.clone()),
        content_hash,
        format: if invalid { "invalid".into() } else { "png".into() },
        width: if invalid { 0 } else { 8 },
        height: if invalid { 0 } else { 8 },
        excluded: if invalid { Exclusion::Invalid } else { Exclusion::None },
    }
}

#[derive(Debug, Clone)]
struct Case {
    /// (content hash index, invalid) per file
    files: Vec<(usize, bool)>,
    min_frequency: Option<usize>,
    k: usize,
    /// per group: cluster choice, whether its embedding failed
    placement: Vec<(usize, bool)>,
    tags: Vec<(usize, usize)>,
}

fn cases() -> impl Strategy<Value = Case> {
    (
        prop::collection::vec((0usize..25, prop::bool::weighted(0.1)), 0..120),
        prop::option::of(2usize..6),
        1usize..6,
        prop::collection::vec((0usize..6, prop::bool::weighted(0.1)), 25),
        prop::collection::vec((0usize..6, 0usize..3), 0..10),
    )
        .prop_map(|(files, min_frequency, k, placement, tags)| Case {
            files,
            min_frequency,
            k,
            placement,
            tags,
        })
}

proptest! {
    #[test]
    fn report_totals_conserve_every_file(case in cases()) {
        let mut records: Vec<ImageRecord> = case
            .files
            .iter()
            .enumerate()
            .map(|(i, (h, invalid))| record(i, *h, *invalid))
            .collect();
        let groups = deduplicate(&records);
        if let Some(t) = case.min_frequency {
            records = exclude_high_frequency(&groups, &records, &ExclusionRule::MinFrequency(t)).unwrap();
        }
        let excluded: HashSet<&str> = records
            .iter()
            .filter(|r| !r.is_clusterable())
            .map(|r| r.image_id.as_str())
            .collect();

        // place clusterable representatives, some failing embedding
        let mut failed = HashSet::new();
        let mut cluster_of_rep: HashMap<String, usize> = HashMap::new();
        let mut sizes = vec![0usize; case.k];
        let mut reps = vec![Vec::new(); case.k];
        for (g, (c, fails)) in groups.iter().zip(case.placement.iter().cycle()) {
            if excluded.contains(g.representative_image_id.as_str()) {
                continue;
            }
            if *fails {
                failed.insert(g.representative_image_id.clone());
                continue;
            }
            let c = c % case.k;
            cluster_of_rep.insert(g.representative_image_id.clone(), c);
            sizes[c] += g.frequency;
            reps[c].push(g.representative_image_id.clone());
        }
        let summaries: Vec<ClusterSummary> = (0..case.k)
            .map(|c| ClusterSummary {
                cluster_index: c,
                size_representatives: reps[c].len(),
                size_total_images: sizes[c],
                medoid_image_id: reps[c].first().cloned(),
                sample_image_ids: reps[c].clone(),
            })
            .collect();
        let tag_events: Vec<TagEvent> = case
            .tags
            .iter()
            .enumerate()
            .map(|(i, (c, l))| event(i as u64 + 1, 1, c % case.k, *l))
            .collect();
        let tags = TagState::replay(&tag_events);

        let report = build_report(&ReportInputs {
            round: 1,
            records: &records,
            groups: &groups,
            summaries: &summaries,
            failed_representatives: &failed,
            tags: &tags,
        })
        .unwrap();

        // per-file oracle
        let rep_of: HashMap<&str, &str> = groups
            .iter()
            .flat_map(|g| g.member_ids.iter().map(move |m| (m.as_str(), g.representative_image_id.as_str())))
            .collect();
        let mut expected = ReportTotals::default();
        for r in &records {
            match r.excluded {
                Exclusion::Invalid => expected.images_invalid += 1,
                Exclusion::HighFrequency => expected.images_excluded_prefilter += 1,
                Exclusion::None => {
                    let rep = rep_of[r.image_id.as_str()];
                    if failed.contains(rep) {
                        expected.images_invalid += 1;
                    } else {
                        match tags.label(1, cluster_of_rep[rep]) {
                            Label::Responsive => expected.images_responsive += 1,
                            Label::NotResponsive => expected.images_not_responsive += 1,
                            Label::FurtherReview => expected.images_further_review += 1,
                            Label::Untagged => expected.images_untagged += 1,
                        }
                    }
                }
            }
        }
        prop_assert_eq!(&report.totals, &expected);
        prop_assert_eq!(report.totals.sum(), records.len());
        prop_assert_eq!(report.corpus_images, records.len());
    }
}
