use etecap::text::tokenize;

#[test]
fn treebank_golden_cases() {
    let body = include_str!("fixtures/treebank_golden.tsv");
    let mut cases = 0;
    for (line_no, line) in body.lines().enumerate() {
        if line.starts_with('#') {
            continue;
        }
        let (input, want) = line
            .split_once('\t')
            .unwrap_or_else(|| panic!("line {}: no tab", line_no + 1));
        let got = tokenize(input).join(" ");
        assert_eq!(got, want, "line {}: {input:?}", line_no + 1);
        cases += 1;
    }
    assert!(cases >= 20);
}
