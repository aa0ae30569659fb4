//! Raw event ingestion and preprocessing into an [`InteractionMatrix`].

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::data::InteractionMatrix;
use crate::error::{Error, Result};

/// One interaction event as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawEvent {
    pub user: String,
    pub item: String,
    pub rating: f64,
}

/// Outcome of [`load_events`]: events in file order plus the malformed-line count.
#[derive(Debug, Clone)]
pub struct LoadedEvents {
    pub events: Vec<RawEvent>,
    pub malformed: usize,
}

/// Read delimited text with columns `(user_id, item_id, rating[, timestamp])`.
/// The delimiter is auto-detected between tab and comma; an optional header
/// line is recognized by a non-numeric first field. Malformed lines are
/// skipped and counted; bulk corruption (more than one line and more than 1%
/// of lines malformed) is a hard error.
pub fn load_events(path: &Path) -> Result<LoadedEvents> {
    let file = File::open(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let reader = BufReader::new(file);

    let mut events = Vec::new();
    let mut malformed = 0usize;
    let mut considered = 0usize;
    let mut delimiter: Option<char> = None;
    let mut first_data_line = true;

    for line in reader.lines() {
        let line = line?;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() {
            continue;
        }
        let delim = *delimiter.get_or_insert_with(|| if trimmed.contains('\t') { '\t' } else { ',' });
        let fields: Vec<&str> = trimmed.split(delim).map(str::trim).collect();
        if first_data_line {
            first_data_line = false;
            // header detection: non-numeric first field
            if fields
                .first()
                .map(|f| f.parse::<f64>().is_err())
                .unwrap_or(false)
            {
                continue;
            }
        }
        considered += 1;
        if fields.len() < 3 {
            malformed += 1;
            continue;
        }
        match fields[2].parse::<f64>() {
            Ok(rating) if fields[0].is_empty() || fields[1].is_empty() => {
                let _ = rating;
                malformed += 1;
            }
            Ok(rating) => events.push(RawEvent {
                user: fields[0].to_string(),
                item: fields[1].to_string(),
                rating,
            }),
            Err(_) => malformed += 1,
        }
    }

    if malformed > 1 && malformed as f64 > 0.01 * considered as f64 {
        return Err(Error::Data(format!(
            "{malformed} of {considered} lines malformed (over 1%) in {}",
            path.display()
        )));
    }
    Ok(LoadedEvents { events, malformed })
}

/// Keep events with `rating >= min_rating`, binarize, then iteratively drop
/// items interacted with by fewer than `min_item_users` users and users with
/// fewer than `min_user_items` items until both thresholds hold. Surviving
/// users and items are densely re-indexed in first-appearance order.
pub fn binarize_and_filter(
    events: &[RawEvent],
    min_rating: f64,
    min_user_items: usize,
    min_item_users: usize,
) -> Result<InteractionMatrix> {
    // binarize: set semantics over (user, item) pairs
    let mut pairs: HashSet<(String, String)> = HashSet::new();
    let mut user_order: Vec<String> = Vec::new();
    let mut item_order: Vec<String> = Vec::new();
    let mut seen_users: HashSet<String> = HashSet::new();
    let mut seen_items: HashSet<String> = HashSet::new();
    for e in events {
        if e.rating < min_rating {
            continue;
        }
        if seen_users.insert(e.user.clone()) {
            user_order.push(e.user.clone());
        }
        if seen_items.insert(e.item.clone()) {
            item_order.push(e.item.clone());
        }
        pairs.insert((e.user.clone(), e.item.clone()));
    }

    let mut user_items: HashMap<&str, HashSet<&str>> = HashMap::new();
    let mut item_users: HashMap<&str, HashSet<&str>> = HashMap::new();
    for (u, i) in &pairs {
        user_items.entry(u).or_default().insert(i);
        item_users.entry(i).or_default().insert(u);
    }

    // removing sparse items can push users below threshold and vice versa;
    // iterate to the fixed point
    loop {
        let dead_items: Vec<&str> = item_users
            .iter()
            .filter(|(_, us)| us.len() < min_item_users)
            .map(|(i, _)| *i)
            .collect();
        for i in &dead_items {
            if let Some(us) = item_users.remove(*i) {
                for u in us {
                    if let Some(set) = user_items.get_mut(u) {
                        set.remove(*i);
                    }
                }
            }
        }
        let dead_users: Vec<&str> = user_items
            .iter()
            .filter(|(_, is)| is.len() < min_user_items)
            .map(|(u, _)| *u)
            .collect();
        for u in &dead_users {
            if let Some(is) = user_items.remove(*u) {
                for i in is {
                    if let Some(set) = item_users.get_mut(i) {
                        set.remove(*u);
                    }
                }
            }
        }
        if dead_items.is_empty() && dead_users.is_empty() {
            break;
        }
    }

    if user_items.is_empty() || item_users.is_empty() {
        return Err(Error::Data(
            "no interactions survive binarization and filtering".into(),
        ));
    }

    let item_index: HashMap<&str, u32> = item_order
        .iter()
        .filter(|i| item_users.contains_key(i.as_str()))
        .enumerate()
        .map(|(idx, i)| (i.as_str(), idx as u32))
        .collect();
    let vocab: Vec<String> = item_order
        .iter()
        .filter(|i| item_users.contains_key(i.as_str()))
        .cloned()
        .collect();

    let mut rows: Vec<Vec<u32>> = Vec::new();
    for u in &user_order {
        if let Some(items) = user_items.get(u.as_str()) {
            let mut row: Vec<u32> = items.iter().map(|i| item_index[i]).collect();
            row.sort_unstable();
            rows.push(row);
        }
    }

    InteractionMatrix::from_rows(rows, vocab.len(), vocab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(content: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.csv");
        let mut f = File::create(&path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        (dir, path)
    }

    #[test]
    fn empty_file_gives_empty_list() {
        let (_d, p) = write_tmp("");
        let out = load_events(&p).unwrap();
        assert!(out.events.is_empty());
        assert_eq!(out.malformed, 0);
    }

    #[test]
    fn three_line_file_in_order() {
        let (_d, p) = write_tmp("1,10,5\n2,20,4\n1,30,3\n");
        let out = load_events(&p).unwrap();
        assert_eq!(out.events.len(), 3);
        assert_eq!(out.events[0].user, "1");
        assert_eq!(out.events[1].item, "20");
        assert_eq!(out.events[2].rating, 3.0);
    }

    #[test]
    fn tab_delimiter_and_header_detected() {
        let (_d, p) = write_tmp("user\titem\trating\n1\t10\t5\n2\t20\t4\n");
        let out = load_events(&p).unwrap();
        assert_eq!(out.events.len(), 2);
        assert_eq!(out.malformed, 0);
    }

    #[test]
    fn one_malformed_line_of_ten_is_skipped_and_reported() {
        let mut content = String::new();
        for i in 0..9 {
            content.push_str(&format!("{i},10,5\n"));
        }
        content.push_str("oops,not,a_rating\n");
        let (_d, p) = write_tmp(&content);
        let out = load_events(&p).unwrap();
        assert_eq!(out.events.len(), 9);
        assert_eq!(out.malformed, 1);
    }

    #[test]
    fn bulk_corruption_is_hard_error() {
        let mut content = String::new();
        for i in 0..200 {
            content.push_str(&format!("{i},10,5\n"));
        }
        content.push_str("bad,line\nbad,line\nbad,line\n");
        let (_d, p) = write_tmp(&content);
        assert!(load_events(&p).is_err());
    }

    #[test]
    fn missing_file_is_hard_error() {
        assert!(load_events(Path::new("/nonexistent/file.csv")).is_err());
    }

    fn ev(u: &str, i: &str, r: f64) -> RawEvent {
        RawEvent {
            user: u.into(),
            item: i.into(),
            rating: r,
        }
    }

    #[test]
    fn no_thresholds_keeps_everything() {
        let events = vec![ev("a", "x", 5.0), ev("b", "y", 5.0), ev("a", "y", 5.0)];
        let m = binarize_and_filter(&events, 0.0, 1, 1).unwrap();
        assert_eq!(m.n_users(), 2);
        assert_eq!(m.n_items(), 2);
        assert_eq!(m.nnz(), 3);
    }

    #[test]
    fn rating_threshold_applies() {
        let events = vec![ev("u1", "i1", 5.0), ev("u1", "i2", 3.0)];
        let m = binarize_and_filter(&events, 4.0, 1, 1).unwrap();
        assert_eq!(m.nnz(), 1);
        assert_eq!(m.item_vocab(), &["i1".to_string()]);
    }

    #[test]
    fn user_below_min_items_is_removed() {
        // the thin user has 4 items, threshold is 5
        let mut events = Vec::new();
        for i in 0..4 {
            events.push(ev("thin", &format!("i{i}"), 5.0));
        }
        for u in 0..5 {
            for i in 0..5 {
                events.push(ev(&format!("u{u}"), &format!("i{i}"), 5.0));
            }
        }
        let m = binarize_and_filter(&events, 4.0, 5, 1).unwrap();
        assert_eq!(m.n_users(), 5);
    }

    #[test]
    fn filtering_iterates_to_fixed_point() {
        // item j is only held by user b; dropping user b (too few items)
        // leaves item j orphaned, which must then be dropped too
        let events = vec![
            ev("a", "x", 5.0),
            ev("a", "y", 5.0),
            ev("c", "x", 5.0),
            ev("c", "y", 5.0),
            ev("b", "j", 5.0),
        ];
        let m = binarize_and_filter(&events, 0.0, 2, 1).unwrap();
        assert_eq!(m.n_users(), 2);
        assert_eq!(m.n_items(), 2);
        // fixed point: every user has >= 2 items, every item >= 1 user
        let mut item_degree = vec![0usize; m.n_items()];
        for u in 0..m.n_users() {
            assert!(m.row(u).len() >= 2);
            for &i in m.row(u) {
                item_degree[i as usize] += 1;
            }
        }
        assert!(item_degree.iter().all(|&d| d >= 1));
    }

    #[test]
    fn empty_result_is_hard_error() {
        let events = vec![ev("a", "x", 1.0)];
        assert!(binarize_and_filter(&events, 4.0, 1, 1).is_err());
    }

    #[test]
    fn duplicate_events_binarize_to_one() {
        let events = vec![ev("a", "x", 5.0), ev("a", "x", 4.0), ev("a", "y", 5.0)];
        let m = binarize_and_filter(&events, 4.0, 1, 1).unwrap();
        assert_eq!(m.nnz(), 2);
    }
}
