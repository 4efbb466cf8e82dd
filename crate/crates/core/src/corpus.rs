//! Interaction ingestion, k-core filtering, leave-one-out splits and
//! training-example expansion.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{EagerError, Result};
use crate::kv::KvFile;

pub const DEFAULT_MAX_HISTORY: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: i64,
}

/// Column layout of a raw interaction file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionFormat {
    pub delimiter: char,
    pub user_col: usize,
    pub item_col: usize,
    pub time_col: usize,
}

impl Default for InteractionFormat {
    fn default() -> Self {
        Self {
            delimiter: ',',
            user_col: 0,
            item_col: 1,
            time_col: 2,
        }
    }
}

/// Read delimited interactions. Exact duplicate rows are dropped (first
/// occurrence kept); blank lines and `#` comments are skipped.
pub fn load_interactions(path: &Path, format: &InteractionFormat) -> Result<Vec<Interaction>> {
    let file = std::fs::File::open(path).map_err(|e| EagerError::io(path, e))?;
    let reader = BufReader::new(file);
    let needed = format.user_col.max(format.item_col).max(format.time_col) + 1;

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| EagerError::io(path, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split(format.delimiter).map(str::trim).collect();
        if cols.len() < needed {
            return Err(EagerError::parse(
                path,
                i + 1,
                format!("expected at least {needed} columns, found {}", cols.len()),
            ));
        }
        let (user, item) = (cols[format.user_col], cols[format.item_col]);
        if user.is_empty() || item.is_empty() {
            return Err(EagerError::parse(path, i + 1, "empty user or item id"));
        }
        let ts_raw = cols[format.time_col];
        let timestamp = ts_raw
            .parse::<i64>()
            .or_else(|_| ts_raw.parse::<f64>().map(|f| f as i64))
            .map_err(|_| EagerError::parse(path, i + 1, format!("bad timestamp `{ts_raw}`")))?;
        let rec = Interaction {
            user_id: user.to_string(),
            item_id: item.to_string(),
            timestamp,
        };
        if seen.insert(rec.clone()) {
            out.push(rec);
        }
    }
    if out.is_empty() {
        return Err(EagerError::EmptyDataset(format!(
            "no interactions in {}",
            path.display()
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub user_ids: Vec<String>,
    /// Chronological item-index sequence per user.
    pub sequences: Vec<Vec<usize>>,
    pub item_ids: Vec<String>,
    item_index: HashMap<String, usize>,
}

impl Dataset {
    pub fn from_parts(
        user_ids: Vec<String>,
        sequences: Vec<Vec<usize>>,
        item_ids: Vec<String>,
    ) -> Result<Self> {
        if user_ids.len() != sequences.len() {
            return Err(EagerError::Shape(format!(
                "{} user ids for {} sequences",
                user_ids.len(),
                sequences.len()
            )));
        }
        let n = item_ids.len();
        if let Some(bad) = sequences.iter().flatten().find(|&&i| i >= n) {
            return Err(EagerError::Shape(format!("item index {bad} >= {n}")));
        }
        let item_index = item_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Ok(Self {
            user_ids,
            sequences,
            item_ids,
            item_index,
        })
    }

    pub fn num_users(&self) -> usize {
        self.sequences.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn item_index(&self, item_id: &str) -> Option<usize> {
        self.item_index.get(item_id).copied()
    }

    /// Write `dataset.manifest`, `vocab.txt`, `users.txt`, `sequences.txt`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| EagerError::io(dir, e))?;
        let mut manifest = KvFile::new();
        manifest.set("num_users", self.num_users());
        manifest.set("num_items", self.num_items());
        manifest.set("num_interactions", self.num_interactions());
        manifest.write(&dir.join("dataset.manifest"))?;
        write_lines(&dir.join("vocab.txt"), self.item_ids.iter())?;
        write_lines(&dir.join("users.txt"), self.user_ids.iter())?;
        write_lines(
            &dir.join("sequences.txt"),
            self.sequences.iter().map(|s| join_indices(s)),
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = KvFile::read(&dir.join("dataset.manifest"))?;
        let item_ids = read_lines(&dir.join("vocab.txt"))?;
        let user_ids = read_lines(&dir.join("users.txt"))?;
        let seq_path = dir.join("sequences.txt");
        let sequences = read_lines(&seq_path)?
            .iter()
            .enumerate()
            .map(|(i, l)| parse_indices(l).map_err(|m| EagerError::parse(&seq_path, i + 1, m)))
            .collect::<Result<Vec<_>>>()?;
        let ds = Self::from_parts(user_ids, sequences, item_ids)?;
        let expect = |key: &str, actual: usize| -> Result<()> {
            match manifest.parsed::<usize>(key)? {
                Some(v) if v == actual => Ok(()),
                other => Err(EagerError::Shape(format!(
                    "manifest {key}={other:?} but files hold {actual}"
                ))),
            }
        };
        expect("num_users", ds.num_users())?;
        expect("num_items", ds.num_items())?;
        expect("num_interactions", ds.num_interactions())?;
        Ok(ds)
    }
}

/// Iteratively drop users and items with fewer than `k` interactions until
/// nothing changes, then index what remains.
pub fn k_core_filter(interactions: &[Interaction], k: usize) -> Result<Dataset> {
    if k == 0 {
        return Err(EagerError::InvalidArgument("k must be >= 1".into()));
    }
    let mut alive = vec![true; interactions.len()];
    loop {
        let mut user_deg: HashMap<&str, usize> = HashMap::new();
        let mut item_deg: HashMap<&str, usize> = HashMap::new();
        for (r, _) in interactions.iter().zip(&alive).filter(|(_, a)| **a) {
            *user_deg.entry(&r.user_id).or_default() += 1;
            *item_deg.entry(&r.item_id).or_default() += 1;
        }
        let mut changed = false;
        for (r, a) in interactions.iter().zip(alive.iter_mut()) {
            if *a && (user_deg[r.user_id.as_str()] < k || item_deg[r.item_id.as_str()] < k) {
                *a = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let mut user_pos: HashMap<&str, usize> = HashMap::new();
    let mut item_pos: HashMap<&str, usize> = HashMap::new();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut per_user: Vec<Vec<(i64, usize)>> = Vec::new();
    for (r, _) in interactions.iter().zip(&alive).filter(|(_, a)| **a) {
        let u = *user_pos.entry(&r.user_id).or_insert_with(|| {
            user_ids.push(r.user_id.clone());
            per_user.push(Vec::new());
            user_ids.len() - 1
        });
        let it = *item_pos.entry(&r.item_id).or_insert_with(|| {
            item_ids.push(r.item_id.clone());
            item_ids.len() - 1
        });
        per_user[u].push((r.timestamp, it));
    }
    if user_ids.is_empty() {
        return Err(EagerError::EmptyDataset(format!(
            "{k}-core filtering removed every interaction"
        )));
    }
    let sequences = per_user
        .into_iter()
        .map(|mut evs| {
            // stable: equal timestamps keep file order
            evs.sort_by_key(|&(t, _)| t);
            evs.into_iter().map(|(_, i)| i).collect()
        })
        .collect();
    Dataset::from_parts(user_ids, sequences, item_ids)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSplit {
    pub user: usize,
    pub train: Vec<usize>,
    pub valid: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub users: Vec<UserSplit>,
    /// Users with fewer than three items; kept out of evaluation.
    pub excluded: Vec<usize>,
}

impl Split {
    /// Training sequences for every user, including the full sequences of
    /// excluded users (they never appear as evaluation targets).
    pub fn training_sequences(&self, dataset: &Dataset) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = self.users.iter().map(|u| u.train.clone()).collect();
        out.extend(self.excluded.iter().map(|&u| dataset.sequences[u].clone()));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_lines(
            path,
            self.users.iter().map(|u| {
                format!("{}\t{}\t{}\t{}", u.user, join_indices(&u.train), u.valid, u.test)
            }),
        )
    }

    pub fn load(path: &Path, dataset: &Dataset) -> Result<Self> {
        let mut users = Vec::new();
        let mut listed = vec![false; dataset.num_users()];
        for (i, line) in read_lines(path)?.iter().enumerate() {
            let bad = |m: &str| EagerError::parse(path, i + 1, m);
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(bad("expected 4 tab-separated columns"));
            }
            let user: usize = cols[0].parse().map_err(|_| bad("bad user index"))?;
            if user >= listed.len() {
                return Err(bad("user index out of range"));
            }
            listed[user] = true;
            users.push(UserSplit {
                user,
                train: parse_indices(cols[1]).map_err(|m| bad(&m))?,
                valid: cols[2].parse().map_err(|_| bad("bad valid item"))?,
                test: cols[3].parse().map_err(|_| bad("bad test item"))?,
            });
        }
        let excluded = (0..dataset.num_users()).filter(|&u| !listed[u]).collect();
        Ok(Split { users, excluded })
    }
}

/// Last item → test, second to last → valid, the rest → train.
pub fn leave_one_out_split(dataset: &Dataset) -> Split {
    let mut users = Vec::new();
    let mut excluded = Vec::new();
    for (u, seq) in dataset.sequences.iter().enumerate() {
        if seq.len() < 3 {
            excluded.push(u);
            continue;
        }
        let n = seq.len();
        users.push(UserSplit {
            user: u,
            train: seq[..n - 2].to_vec(),
            valid: seq[n - 2],
            test: seq[n - 1],
        });
    }
    if !excluded.is_empty() {
        log::warn!(
            "{} users with fewer than 3 items excluded from evaluation",
            excluded.len()
        );
    }
    Split { users, excluded }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingExample {
    pub user: usize,
    pub history: Vec<usize>,
    pub target: usize,
}

/// Keep the most recent `max_history` items.
pub fn truncate_history(items: &[usize], max_history: usize) -> &[usize] {
    &items[items.len().saturating_sub(max_history)..]
}

/// One example per prefix position of every training sequence.
pub fn make_training_examples(split: &Split, max_history: usize) -> Vec<TrainingExample> {
    let mut out = Vec::new();
    for u in &split.users {
        for p in 1..u.train.len() {
            out.push(TrainingExample {
                user: u.user,
                history: truncate_history(&u.train[..p], max_history).to_vec(),
                target: u.train[p],
            });
        }
    }
    out
}

fn join_indices(items: &[usize]) -> String {
    let mut s = String::with_capacity(items.len() * 6);
    for (i, it) in items.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        s.push_str(&it.to_string());
    }
    s
}

fn parse_indices(line: &str) -> std::result::Result<Vec<usize>, String> {
    line.split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|_| format!("bad index `{t}`")))
        .collect()
}

pub(crate) fn write_lines<I, S>(path: &Path, lines: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let file = std::fs::File::create(path).map_err(|e| EagerError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for l in lines {
        writeln!(w, "{}", l.as_ref()).map_err(|e| EagerError::io(path, e))?;
    }
    w.flush().map_err(|e| EagerError::io(path, e))
}

pub(crate) fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| EagerError::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn ix(user: &str, item: &str, t: i64) -> Interaction {
        Interaction {
            user_id: user.into(),
            item_id: item.into(),
            timestamp: t,
        }
    }

    fn write_tmp(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_three_rows_into_two_users() {
        let f = write_tmp("u1,i1,10\nu1,i2,20\nu2,i1,5\n");
        let rows = load_interactions(f.path(), &InteractionFormat::default()).unwrap();
        assert_eq!(rows.len(), 3);
        let ds = k_core_filter(&rows, 1).unwrap();
        assert_eq!(ds.num_users(), 2);
        assert_eq!(ds.sequences, vec![vec![0, 1], vec![0]]);
    }

    #[test]
    fn duplicate_rows_collapse() {
        let f = write_tmp("u1,i1,10\nu1,i1,10\nu1,i2,20\n");
        let rows = load_interactions(f.path(), &InteractionFormat::default()).unwrap();
        assert_eq!(rows.len(), 2);
    }

    #[test]
    fn malformed_row_reports_line() {
        let f = write_tmp("u1,i1,10\nu1,i2\n");
        let err = load_interactions(f.path(), &InteractionFormat::default()).unwrap_err();
        assert!(matches!(err, EagerError::Parse { line: 2, .. }), "{err}");
        let f = write_tmp("u1,i1,ten\n");
        let err = load_interactions(f.path(), &InteractionFormat::default()).unwrap_err();
        assert!(matches!(err, EagerError::Parse { line: 1, .. }));
    }

    #[test]
    fn empty_file_is_an_error() {
        let f = write_tmp("\n# nothing\n");
        let err = load_interactions(f.path(), &InteractionFormat::default()).unwrap_err();
        assert!(matches!(err, EagerError::EmptyDataset(_)));
    }

    #[test]
    fn tab_delimited_with_custom_columns() {
        let f = write_tmp("i1\t4.0\tu1\t100\n");
        let fmt = InteractionFormat {
            delimiter: '\t',
            user_col: 2,
            item_col: 0,
            time_col: 3,
        };
        let rows = load_interactions(f.path(), &fmt).unwrap();
        assert_eq!(rows, vec![ix("u1", "i1", 100)]);
    }

    #[test]
    fn k1_is_a_no_op() {
        let rows = vec![ix("u1", "a", 1), ix("u2", "b", 2), ix("u1", "c", 3)];
        let ds = k_core_filter(&rows, 1).unwrap();
        assert_eq!(ds.num_interactions(), 3);
        assert_eq!(ds.item_ids, vec!["a", "b", "c"]);
    }

    #[test]
    fn five_core_drops_sparse_user_and_item() {
        let mut rows: Vec<_> = (0..5).map(|t| ix("u1", "a", t)).collect();
        rows.push(ix("u2", "b", 9));
        let ds = k_core_filter(&rows, 5).unwrap();
        assert_eq!(ds.user_ids, vec!["u1"]);
        assert_eq!(ds.item_ids, vec!["a"]);
        assert_eq!(ds.sequences[0].len(), 5);
    }

    #[test]
    fn filtering_everything_is_an_error() {
        let rows = vec![ix("u1", "a", 1)];
        assert!(matches!(
            k_core_filter(&rows, 5),
            Err(EagerError::EmptyDataset(_))
        ));
    }

    #[test]
    fn timestamp_ties_keep_file_order() {
        let rows = vec![ix("u", "x", 5), ix("u", "y", 5), ix("u", "z", 1)];
        let ds = k_core_filter(&rows, 1).unwrap();
        // z first by time, then x and y in file order
        assert_eq!(ds.sequences[0], vec![2, 0, 1]);
    }

    /// Independent pruner: recount from scratch on a user → item multiset,
    /// removing one offending entity at a time.
    fn brute_force_core(rows: &[Interaction], k: usize) -> HashSet<(String, String, i64)> {
        let mut live: Vec<&Interaction> = rows.iter().collect();
        loop {
            let bad_user = live.iter().map(|r| &r.user_id).find(|u| {
                live.iter().filter(|r| &r.user_id == *u).count() < k
            });
            if let Some(u) = bad_user.cloned() {
                live.retain(|r| r.user_id != u);
                continue;
            }
            let bad_item = live.iter().map(|r| &r.item_id).find(|i| {
                live.iter().filter(|r| &r.item_id == *i).count() < k
            });
            if let Some(i) = bad_item.cloned() {
                live.retain(|r| r.item_id != i);
                continue;
            }
            break;
        }
        live.iter()
            .map(|r| (r.user_id.clone(), r.item_id.clone(), r.timestamp))
            .collect()
    }

    #[test]
    fn k_core_matches_brute_force_pruner() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut rows = Vec::new();
        for u in 0..100 {
            for t in 0..rng.random_range(3..12) {
                let item = format!("p{}", rng.random_range(0..40));
                rows.push(ix(&format!("u{u}"), &item, t));
            }
        }
        // ten rare items with three interactions each
        for r in 0..10 {
            for j in 0..3 {
                rows.push(ix(&format!("u{}", r * 7 + j), &format!("rare{r}"), 100 + j as i64));
            }
        }
        let ds = k_core_filter(&rows, 5).unwrap();
        for r in 0..10 {
            assert!(ds.item_index(&format!("rare{r}")).is_none());
        }
        let expected = brute_force_core(&rows, 5);
        assert_eq!(ds.num_interactions(), expected.len());
        let users: HashSet<&String> = expected.iter().map(|e| &e.0).collect();
        assert_eq!(ds.num_users(), users.len());
        let mut user_deg = vec![0; ds.num_users()];
        let mut item_deg = vec![0; ds.num_items()];
        for (u, s) in ds.sequences.iter().enumerate() {
            user_deg[u] = s.len();
            for &i in s {
                item_deg[i] += 1;
            }
        }
        assert!(user_deg.iter().all(|&d| d >= 5));
        assert!(item_deg.iter().all(|&d| d >= 5));
    }

    fn dataset(seqs: Vec<Vec<usize>>, n: usize) -> Dataset {
        let users = (0..seqs.len()).map(|u| format!("u{u}")).collect();
        let items = (0..n).map(|i| format!("i{i}")).collect();
        Dataset::from_parts(users, seqs, items).unwrap()
    }

    #[test]
    fn split_five_items() {
        let ds = dataset(vec![vec![0, 1, 2, 3, 4], vec![2, 1, 0], vec![1, 2]], 5);
        let split = leave_one_out_split(&ds);
        assert_eq!(split.users[0].train, vec![0, 1, 2]);
        assert_eq!((split.users[0].valid, split.users[0].test), (3, 4));
        assert_eq!(split.users[1].train, vec![2]);
        assert_eq!((split.users[1].valid, split.users[1].test), (1, 0));
        assert_eq!(split.excluded, vec![2]);
    }

    #[test]
    fn split_counting_identity_on_synthetic_users() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let seqs: Vec<Vec<usize>> = (0..1000)
            .map(|_| (0..rng.random_range(3..30)).map(|_| rng.random_range(0..50)).collect())
            .collect();
        let total: usize = seqs.iter().map(Vec::len).sum();
        let ds = dataset(seqs, 50);
        let split = leave_one_out_split(&ds);
        let train: usize = split.users.iter().map(|u| u.train.len()).sum();
        assert_eq!(train + 2 * split.users.len(), total);
        for u in &split.users {
            let mut whole = u.train.clone();
            whole.extend([u.valid, u.test]);
            assert_eq!(whole, ds.sequences[u.user]);
        }
    }

    #[test]
    fn examples_enumerate_prefixes() {
        let ds = dataset(vec![vec![0, 1, 2, 3, 4]], 5);
        let ex = make_training_examples(&leave_one_out_split(&ds), 20);
        assert_eq!(ex.len(), 2);
        assert_eq!((ex[0].history.clone(), ex[0].target), (vec![0], 1));
        assert_eq!((ex[1].history.clone(), ex[1].target), (vec![0, 1], 2));
    }

    #[test]
    fn history_is_capped_at_most_recent() {
        let seq: Vec<usize> = (0..27).collect();
        let ds = dataset(vec![seq], 27);
        let ex = make_training_examples(&leave_one_out_split(&ds), 20);
        let last = ex.last().unwrap();
        assert_eq!(last.history.len(), 20);
        assert_eq!(last.history[0], 4);
        assert_eq!(last.target, 24);
    }

    #[test]
    fn example_count_and_no_leakage() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let seqs: Vec<Vec<usize>> = (0..50)
            .map(|_| (0..rng.random_range(3..15)).map(|_| rng.random_range(0..20)).collect())
            .collect();
        let ds = dataset(seqs, 20);
        let split = leave_one_out_split(&ds);
        let ex = make_training_examples(&split, 20);
        let expected: usize = split
            .users
            .iter()
            .map(|u| u.train.len().saturating_sub(1))
            .sum();
        assert_eq!(ex.len(), expected);
        // every target comes from a train position
        for e in &ex {
            let u = split.users.iter().find(|u| u.user == e.user).unwrap();
            let pos = e.history.len();
            assert!(u.train.contains(&e.target));
            assert!(pos < u.train.len());
        }
    }

    #[test]
    fn dataset_and_split_roundtrip_on_disk() {
        let ds = dataset(vec![vec![0, 1, 2, 1], vec![2, 2, 0]], 3);
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);
        let split = leave_one_out_split(&ds);
        split.save(&dir.path().join("split.txt")).unwrap();
        assert_eq!(Split::load(&dir.path().join("split.txt"), &ds).unwrap(), split);
    }
}
