//! Token batch files: one sequence per line, base-10 ids separated by single
//! spaces, no leading or trailing whitespace, every line the same length.

use std::fmt;

use atinuke::IndexTensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenError {
    Empty,
    Malformed {
        line: usize,
        column: usize,
        text: String,
    },
    Ragged {
        line: usize,
        found: usize,
        expected: usize,
    },
    OutOfVocab {
        line: usize,
        column: usize,
        id: usize,
        vocab: usize,
    },
    TooLong {
        len: usize,
        max_len: usize,
    },
}

impl fmt::Display for TokenError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Empty => write!(f, "no sequences in token file"),
            Self::Malformed { line, column, text } => {
                write!(f, "line {line}, column {column}: malformed token {text:?}")
            }
            Self::Ragged { line, found, expected } => write!(
                f,
                "line {line}: {found} tokens, expected {expected} (ragged batches are not supported)"
            ),
            Self::OutOfVocab { line, column, id, vocab } => write!(
                f,
                "line {line}, column {column}: token {id} is out of range for vocab size {vocab}"
            ),
            Self::TooLong { len, max_len } => {
                write!(f, "sequences have {len} tokens, more than max_len {max_len}")
            }
        }
    }
}

impl std::error::Error for TokenError {}

/// Parses a token batch. Columns are 1-based byte offsets into the line.
pub fn parse(text: &str) -> Result<IndexTensor, TokenError> {
    let body = text.strip_suffix('\n').unwrap_or(text);
    if body.is_empty() {
        return Err(TokenError::Empty);
    }
    let mut rows: Vec<Vec<usize>> = Vec::new();
    for (i, line) in body.split('\n').enumerate() {
        let lineno = i + 1;
        let mut row = Vec::new();
        let mut column = 1;
        for tok in line.split(' ') {
            let valid = !tok.is_empty() && tok.bytes().all(|b| b.is_ascii_digit());
            let id = valid.then(|| tok.parse::<usize>().ok()).flatten();
            match id {
                Some(id) => row.push(id),
                None => {
                    return Err(TokenError::Malformed {
                        line: lineno,
                        column,
                        text: tok.to_string(),
                    })
                }
            }
            column += tok.len() + 1;
        }
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(TokenError::Ragged {
                    line: lineno,
                    found: row.len(),
                    expected: first.len(),
                });
            }
        }
        rows.push(row);
    }
    Ok(IndexTensor::from_rows(&rows).expect("rows are rectangular and non-empty"))
}

/// Checks ids against `vocab` and sequence length against `max_len`.
pub fn check(
    tokens: &IndexTensor,
    text: &str,
    vocab: usize,
    max_len: usize,
) -> Result<(), TokenError> {
    let seq = tokens.shape()[1];
    if seq > max_len {
        return Err(TokenError::TooLong { len: seq, max_len });
    }
    for (flat, &id) in tokens.data().iter().enumerate() {
        if id >= vocab {
            let (line, index) = (flat / seq, flat % seq);
            let source = text.split('\n').nth(line).unwrap_or("");
            let column = 1 + source
                .split(' ')
                .take(index)
                .map(|t| t.len() + 1)
                .sum::<usize>();
            return Err(TokenError::OutOfVocab {
                line: line + 1,
                column,
                id,
                vocab,
            });
        }
    }
    Ok(())
}
