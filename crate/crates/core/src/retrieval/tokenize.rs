/// Lowercases, splits on anything that is not alphanumeric and drops tokens
/// shorter than two characters. No stemming, no stopwords.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| t.chars().count() >= 2)
        .map(str::to_lowercase)
        .collect()
}
