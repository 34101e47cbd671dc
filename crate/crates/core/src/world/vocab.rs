use crate::model::Token;

pub const PAD: Token = 0;
pub const BOS: Token = 1;
pub const EOS: Token = 2;
pub const YES: Token = 3;
pub const NO: Token = 4;
pub const ASK_DESCRIBE: Token = 5;
pub const ASK_EXIST: Token = 6;
pub const ASK_COUNT: Token = 7;
pub const SEP: Token = 8;
pub const QUERY: Token = 9;
const FIRST_DIGIT: Token = 10;
/// Digits `0..=9` are tokens `10..=19`.
pub const MAX_DIGIT: usize = 9;
const FIRST_OBJECT: Token = 20;

const DEFAULT_NAMES: [&str; 12] = [
    "cat", "dog", "car", "tree", "cup", "book", "chair", "lamp", "ball", "bird", "phone", "clock",
];

/// Closed template vocabulary: specials, answer words, digits and one token
/// per catalog object. With the default 12 objects this is 32 tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocabulary {
    objects: usize,
}

impl Vocabulary {
    pub fn new(objects: usize) -> Self {
        Self { objects }
    }

    pub fn size(&self) -> usize {
        FIRST_OBJECT + self.objects
    }

    pub fn objects(&self) -> usize {
        self.objects
    }

    pub fn object_token(&self, object: usize) -> Token {
        debug_assert!(object < self.objects);
        FIRST_OBJECT + object
    }

    pub fn token_object(&self, token: Token) -> Option<usize> {
        (token >= FIRST_OBJECT && token < self.size()).then(|| token - FIRST_OBJECT)
    }

    pub fn digit_token(&self, n: usize) -> Token {
        debug_assert!(n <= MAX_DIGIT);
        FIRST_DIGIT + n
    }

    pub fn token_digit(&self, token: Token) -> Option<usize> {
        (FIRST_DIGIT..=FIRST_DIGIT + MAX_DIGIT)
            .contains(&token)
            .then(|| token - FIRST_DIGIT)
    }

    pub fn object_name(&self, object: usize) -> String {
        DEFAULT_NAMES
            .get(object)
            .map_or_else(|| format!("obj{object}"), |s| s.to_string())
    }

    pub fn token_text(&self, token: Token) -> String {
        match token {
            PAD => "<pad>".into(),
            BOS => "<bos>".into(),
            EOS => "<eos>".into(),
            YES => "yes".into(),
            NO => "no".into(),
            ASK_DESCRIBE => "describe".into(),
            ASK_EXIST => "is-there".into(),
            ASK_COUNT => "how-many".into(),
            SEP => ",".into(),
            QUERY => "?".into(),
            t => {
                if let Some(d) = self.token_digit(t) {
                    d.to_string()
                } else if let Some(o) = self.token_object(t) {
                    self.object_name(o)
                } else {
                    format!("<unk:{t}>")
                }
            }
        }
    }

    /// Space-separated template text.
    pub fn detokenize(&self, tokens: &[Token]) -> String {
        tokens
            .iter()
            .map(|&t| self.token_text(t))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
