//! Topic names, topic filters, and wildcard matching.

use std::fmt;

use thiserror::Error;

/// Maximum encoded length of a topic name or filter, in bytes.
pub const MAX_TOPIC_LEN: usize = 65_535;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopicError {
    #[error("topic must not be empty")]
    Empty,
    #[error("topic exceeds {MAX_TOPIC_LEN} bytes")]
    TooLong,
    #[error("topic must not contain a NUL character")]
    Nul,
    #[error("wildcard character in topic name")]
    WildcardInTopicName,
    #[error("wildcard must occupy an entire level, '#' only the last")]
    InvalidWildcard,
}

/// A validated topic name: `/`-separated levels, no wildcards, no NUL.
/// Empty levels are permitted (`a//b` has three levels).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Topic(String);

impl Topic {
    pub fn new(value: impl Into<String>) -> Result<Self, TopicError> {
        let value = value.into();
        validate_common(&value)?;
        if value.contains(['+', '#']) {
            return Err(TopicError::WildcardInTopicName);
        }
        Ok(Topic(value))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn levels(&self) -> impl Iterator<Item = &str> {
        self.0.split('/')
    }
}

impl fmt::Display for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A validated topic filter. `+` matches exactly one level and must
/// occupy an entire level; `#` matches any remaining levels and may only
/// appear as the entire last level.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TopicFilter(String);

impl TopicFilter {
    pub fn new(value: impl Into<String>) -> Result<Self, TopicError> {
        let value = value.into();
        validate_common(&value)?;
        let levels: Vec<&str> = value.split('/').collect();
        for (i, level) in levels.iter().enumerate() {
            if level.contains('#') {
                if *level != "#" || i + 1 != levels.len() {
                    return Err(TopicError::InvalidWildcard);
                }
            } else if level.contains('+') && *level != "+" {
                return Err(TopicError::InvalidWildcard);
            }
        }
        Ok(TopicFilter(value))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TopicFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn validate_common(value: &str) -> Result<(), TopicError> {
    if value.is_empty() {
        return Err(TopicError::Empty);
    }
    if value.len() > MAX_TOPIC_LEN {
        return Err(TopicError::TooLong);
    }
    if value.contains('\0') {
        return Err(TopicError::Nul);
    }
    Ok(())
}

/// True iff `topic` is in the match set of `filter` under MQTT 3.1.1
/// wildcard semantics. `a/#` matches `a` as well as any deeper topic;
/// `a/+` matches exactly one extra level, including the empty one.
pub fn topic_matches(filter: &TopicFilter, topic: &Topic) -> bool {
    let fl: Vec<&str> = filter.0.split('/').collect();
    let tl: Vec<&str> = topic.0.split('/').collect();
    for i in 0..fl.len() {
        if fl[i] == "#" {
            return true;
        }
        match tl.get(i) {
            None => return false,
            Some(t) => {
                if fl[i] != "+" && fl[i] != *t {
                    return false;
                }
            }
        }
    }
    // Filter exhausted: a match requires the topic to be exhausted too,
    // unless the check above already consumed a trailing '#'.
    fl.len() == tl.len()
}
