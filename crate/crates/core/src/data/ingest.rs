use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Interaction, InteractionLog, ItemId, UserId};

pub const DEFAULT_MIN_INTERACTIONS: usize = 5;

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    user_id: u64,
    item_id: u64,
    timestamp: i64,
    rating: f64,
}

/// Parses `user_id,item_id,timestamp,rating` rows without filtering.
pub fn read_interactions(r: impl Read) -> Result<InteractionLog> {
    let mut reader = csv::Reader::from_reader(r);
    let mut log = InteractionLog::new();
    for (k, row) in reader.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| Error::Parse { line: k + 2, msg: e.to_string() })?;
        if !row.rating.is_finite() {
            return Err(Error::Parse { line: k + 2, msg: format!("rating {}", row.rating) });
        }
        log.push(
            UserId(row.user_id),
            Interaction { item: ItemId(row.item_id), timestamp: row.timestamp, rating: row.rating },
        );
    }
    Ok(log)
}

/// Reads a CSV log and applies the rating, minimum-length and truncation filters.
pub fn ingest(path: impl AsRef<Path>, min_interactions: usize) -> Result<InteractionLog> {
    let log = read_interactions(BufReader::new(File::open(path)?))?;
    log.preprocess(min_interactions)
}

pub fn write_interactions(log: &InteractionLog, w: impl Write) -> Result<()> {
    let mut writer = csv::Writer::from_writer(w);
    for (user, seq) in log.users() {
        for x in seq {
            writer.serialize(Row { user_id: user.0, item_id: x.item.0, timestamp: x.timestamp, rating: x.rating })?;
        }
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filters_like_a_reference_script() {
        let csv = "user_id,item_id,timestamp,rating\n\
                   1,10,3,5\n1,11,1,4\n1,12,2,3\n1,13,4,4.5\n\
                   2,10,1,2\n2,11,2,1\n\
                   3,20,5,5\n";
        let log = read_interactions(csv.as_bytes()).unwrap().preprocess(2).unwrap();
        // user 1 keeps ratings > 3 in time order; user 2 has none; user 3 is too short
        assert_eq!(log.num_users(), 1);
        assert_eq!(log.items_of(UserId(1)), vec![ItemId(11), ItemId(10), ItemId(13)]);
    }

    #[test]
    fn low_ratings_only_is_an_error() {
        let csv = "user_id,item_id,timestamp,rating\n1,1,1,3\n1,2,2,1\n";
        let log = read_interactions(csv.as_bytes()).unwrap();
        assert!(matches!(log.preprocess(1), Err(Error::NoInteractions)));
    }

    #[test]
    fn long_histories_are_truncated() {
        let mut csv = String::from("user_id,item_id,timestamp,rating\n");
        for t in 0..60 {
            csv.push_str(&format!("7,{t},{t},5\n"));
        }
        let log = read_interactions(csv.as_bytes()).unwrap().preprocess(5).unwrap();
        let items = log.items_of(UserId(7));
        assert_eq!(items.len(), 50);
        assert_eq!(items[0], ItemId(10));
    }

    #[test]
    fn bad_rows_report_line() {
        let csv = "user_id,item_id,timestamp,rating\n1,1,1,5\n1,x,2,5\n";
        match read_interactions(csv.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn write_then_read_round_trips() {
        let log =
            InteractionLog::from_sequences([(UserId(1), vec![ItemId(3), ItemId(4)]), (UserId(2), vec![ItemId(5)])]);
        let mut buf = Vec::new();
        write_interactions(&log, &mut buf).unwrap();
        assert_eq!(read_interactions(buf.as_slice()).unwrap(), log);
    }
}
