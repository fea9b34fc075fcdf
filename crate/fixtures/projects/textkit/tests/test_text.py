from textkit import slugify, truncate


def test_slugify_lowercase_input():
    assert slugify("hello world") == "hello-world"


def test_truncate_short_text_is_unchanged():
    assert truncate("hi", 10) == "hi"
