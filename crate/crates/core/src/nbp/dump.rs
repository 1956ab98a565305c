//! Line-delimited JSON dumps of packed sequences:
//! `{"blocks":[{"kind":"text|visual","tokens":[...]}, ...]}`.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Block, PackedSequence, VocabLayout};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Record {
    blocks: Vec<Block>,
}

pub fn write_packed_dump(path: &Path, seqs: &[PackedSequence]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in seqs {
        serde_json::to_writer(
            &mut w,
            &Record {
                blocks: s.blocks.clone(),
            },
        )?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_packed_dump(path: &Path, layout: &VocabLayout) -> Result<Vec<PackedSequence>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(&line)?;
        out.push(PackedSequence::new(r.blocks, layout)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nbp::{make_text_blocks, make_visual_blocks_from_codes};

    #[test]
    fn round_trip() {
        let l = VocabLayout::new(5, 8, 2).unwrap();
        let mut blocks = make_visual_blocks_from_codes((1, 1), &[vec![1, 7]], &l).unwrap();
        blocks.extend(make_text_blocks(&[0, 4], &l).unwrap());
        let seq = PackedSequence::new(blocks, &l).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seq.jsonl");
        write_packed_dump(&path, std::slice::from_ref(&seq)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(r#"{"blocks":[{"kind":"text","tokens":[15,13]}"#), "{text}");
        assert_eq!(read_packed_dump(&path, &l).unwrap(), vec![seq]);
    }
}
