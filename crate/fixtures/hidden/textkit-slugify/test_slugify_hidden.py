from textkit import slugify


def test_mixed_case():
    assert slugify("Hello World") == "hello-world"


def test_punctuation_is_dropped():
    assert slugify("Rust & Python: 2024!") == "rust-python-2024"


def test_custom_separator():
    assert slugify("Big Data", sep="_") == "big_data"
