use std::fmt;
use std::sync::{Arc, LazyLock};

use regex::Regex;

/// Shortest cleaned text kept, in characters.
pub const DEFAULT_MIN_LEN: usize = 30;

static URL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?:(?:https?|ftp)://|www\.)\S*").expect("url pattern"));

static EMOJI: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"[\p{Extended_Pictographic}\p{Emoji_Modifier}\p{Regional_Indicator}\x{200D}\x{FE0E}\x{FE0F}\x{20E3}]")
        .expect("emoji pattern")
});

const KEPT_PUNCTUATION: &[char] = &['.', ',', ';', ':', '?', '!', '\'', '"', '(', ')', '-'];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Rejection {
    TooShort { len: usize, min: usize },
    /// Dropped by the optional language predicate.
    Language,
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rejection::TooShort { len, min } => {
                write!(f, "too short: {len} characters, minimum {min}")
            }
            Rejection::Language => f.write_str("rejected by language filter"),
        }
    }
}

fn keep_char(c: char) -> bool {
    c.is_alphabetic() || c.is_numeric() || c.is_whitespace() || KEPT_PUNCTUATION.contains(&c)
}

fn clean_pass(text: &str) -> String {
    let lowered = text.to_lowercase();
    let no_urls = URL.replace_all(&lowered, "");
    let no_emoji = EMOJI.replace_all(&no_urls, "");
    let filtered: String = no_emoji.chars().filter(|&c| keep_char(c)).collect();
    filtered.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Normalise an issue's title and body into model text.
///
/// Steps: join title and body with a space, lowercase, drop URLs, drop emoji,
/// drop characters other than letters, digits, whitespace and `.,;:?!'"()-`,
/// collapse whitespace, trim. The steps repeat until the text is stable, since
/// deleting a character can splice a new URL together.
pub fn clean_text(title: &str, body: &str, min_len: usize) -> Result<String, Rejection> {
    let mut text = clean_pass(&format!("{title} {body}"));
    loop {
        let again = clean_pass(&text);
        if again == text {
            break;
        }
        text = again;
    }
    let len = text.chars().count();
    if len < min_len {
        return Err(Rejection::TooShort { len, min: min_len });
    }
    Ok(text)
}

type LanguagePredicate = Arc<dyn Fn(&str) -> bool + Send + Sync>;

/// [`clean_text`] with a configured minimum length and an optional
/// language predicate (off by default).
#[derive(Clone)]
pub struct TextCleaner {
    pub min_len: usize,
    language: Option<LanguagePredicate>,
}

impl Default for TextCleaner {
    fn default() -> Self {
        Self::new(DEFAULT_MIN_LEN)
    }
}

impl fmt::Debug for TextCleaner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TextCleaner")
            .field("min_len", &self.min_len)
            .field("language_filter", &self.language.is_some())
            .finish()
    }
}

impl TextCleaner {
    pub fn new(min_len: usize) -> Self {
        TextCleaner {
            min_len,
            language: None,
        }
    }

    /// Keep only texts for which `keep` returns true.
    pub fn with_language_filter<F>(mut self, keep: F) -> Self
    where
        F: Fn(&str) -> bool + Send + Sync + 'static,
    {
        self.language = Some(Arc::new(keep));
        self
    }

    pub fn clean(&self, title: &str, body: &str) -> Result<String, Rejection> {
        let text = clean_text(title, body, self.min_len)?;
        match &self.language {
            Some(keep) if !keep(&text) => Err(Rejection::Language),
            _ => Ok(text),
        }
    }
}
