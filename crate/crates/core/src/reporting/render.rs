//! Markdown and HTML renderings of the same block list.

use std::fmt::Write;

#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    Heading(u8, String),
    Para(String),
    KeyValues(Vec<(String, String)>),
    Table {
        header: Vec<String>,
        rows: Vec<Vec<String>>,
        /// Emphasized closing row, e.g. totals.
        footer: Option<Vec<String>>,
    },
    List(Vec<String>),
    /// Complete `<svg>` element.
    Svg(String),
}

pub fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

fn escape_md_cell(s: &str) -> String {
    s.replace('|', "\\|")
}

/// Inline `code` spans become `<code>`; everything else is escaped.
fn inline_html(s: &str) -> String {
    let mut out = String::new();
    for (i, part) in s.split('`').enumerate() {
        if i % 2 == 1 {
            let _ = write!(out, "<code>{}</code>", escape_html(part));
        } else {
            out.push_str(&escape_html(part));
        }
    }
    out
}

pub fn render_markdown(blocks: &[Block]) -> String {
    let mut out = String::new();
    for b in blocks {
        match b {
            Block::Heading(level, text) => {
                let _ = writeln!(out, "{} {text}\n", "#".repeat(*level as usize));
            }
            Block::Para(text) => {
                let _ = writeln!(out, "{text}\n");
            }
            Block::KeyValues(kv) => {
                for (k, v) in kv {
                    let _ = writeln!(out, "- **{k}:** {v}");
                }
                out.push('\n');
            }
            Block::Table {
                header,
                rows,
                footer,
            } => {
                let line = |cells: &[String], bold: bool| {
                    let cells: Vec<String> = cells
                        .iter()
                        .map(|c| {
                            let c = escape_md_cell(c);
                            if bold {
                                format!("**{c}**")
                            } else {
                                c
                            }
                        })
                        .collect();
                    format!("| {} |\n", cells.join(" | "))
                };
                out.push_str(&line(header, false));
                let align: Vec<&str> = (0..header.len())
                    .map(|i| if i == 0 { "---" } else { "---:" })
                    .collect();
                let _ = writeln!(out, "| {} |", align.join(" | "));
                for r in rows {
                    out.push_str(&line(r, false));
                }
                if let Some(f) = footer {
                    out.push_str(&line(f, true));
                }
                out.push('\n');
            }
            Block::List(items) => {
                for i in items {
                    let _ = writeln!(out, "- {i}");
                }
                out.push('\n');
            }
            Block::Svg(svg) => {
                let _ = writeln!(out, "{svg}\n");
            }
        }
    }
    out
}

pub fn render_html(title: &str, blocks: &[Block]) -> String {
    let mut out = String::new();
    let _ = write!(
        out,
        "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n<title>{}</title>\n\
         <style>\nbody{{font-family:sans-serif;max-width:60rem;margin:2rem auto;padding:0 1rem}}\n\
         table{{border-collapse:collapse}}\ntd,th{{border:1px solid #ccc;padding:.25rem .5rem}}\n\
         td:not(:first-child){{text-align:right}}\ntfoot td{{font-weight:bold}}\n</style>\n</head>\n<body>\n",
        escape_html(title)
    );
    for b in blocks {
        match b {
            Block::Heading(level, text) => {
                let _ = writeln!(out, "<h{level}>{}</h{level}>", inline_html(text));
            }
            Block::Para(text) => {
                let _ = writeln!(out, "<p>{}</p>", inline_html(text));
            }
            Block::KeyValues(kv) => {
                out.push_str("<dl>\n");
                for (k, v) in kv {
                    let _ = writeln!(out, "<dt>{}</dt><dd>{}</dd>", inline_html(k), inline_html(v));
                }
                out.push_str("</dl>\n");
            }
            Block::Table {
                header,
                rows,
                footer,
            } => {
                let row = |tag: &str, cells: &[String]| {
                    let cells: String = cells
                        .iter()
                        .map(|c| format!("<{tag}>{}</{tag}>", inline_html(c)))
                        .collect();
                    format!("<tr>{cells}</tr>\n")
                };
                out.push_str("<table>\n<thead>\n");
                out.push_str(&row("th", header));
                out.push_str("</thead>\n<tbody>\n");
                for r in rows {
                    out.push_str(&row("td", r));
                }
                out.push_str("</tbody>\n");
                if let Some(f) = footer {
                    out.push_str("<tfoot>\n");
                    out.push_str(&row("td", f));
                    out.push_str("</tfoot>\n");
                }
                out.push_str("</table>\n");
            }
            Block::List(items) => {
                out.push_str("<ul>\n");
                for i in items {
                    let _ = writeln!(out, "<li>{}</li>", inline_html(i));
                }
                out.push_str("</ul>\n");
            }
            Block::Svg(svg) => {
                let _ = writeln!(out, "<figure>\n{svg}\n</figure>");
            }
        }
    }
    out.push_str("</body>\n</html>\n");
    out
}
