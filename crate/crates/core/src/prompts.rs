//! Versioned prompt assets compiled into the binary.

pub const BRAINSTORM_V1: &str = include_str!("../assets/prompts/brainstorm/v1.txt");
pub const MANAGER_V1: &str = include_str!("../assets/prompts/manager/v1.txt");
pub const MANAGER_REASK: &str = include_str!("../assets/prompts/manager/reask.txt");
pub const FRAMEWORK: &str = include_str!("../assets/prompts/manager/framework.txt");
pub const SCRIPTGEN_V1: &str = include_str!("../assets/prompts/scriptgen/v1.txt");

/// Substitutes `{key}` placeholders in a single pass, so substituted values
/// are never themselves expanded.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after.find('}').and_then(|close| {
            let key = &after[..close];
            vars.iter().find(|(k, _)| *k == key).map(|(_, v)| (close, *v))
        });
        match hit {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

#[cfg(test)]
mod tests {
    use super::render;

    #[test]
    fn single_pass_substitution() {
        assert_eq!(render("a {x} b {y} {z}", &[("x", "{y}"), ("y", "2")]), "a {y} b 2 {z}");
    }
}
