from crowdcount.spinner_progress_utils import progress_bar, spinner


def test_spinner_returns_the_wrapped_value():
    @spinner(message=" [cyan]Counting...")
    def count(a, b):
        return a + b

    assert count(2, b=3) == 5
    assert count.__name__ == "count"


def test_progress_bar_returns_the_generator_value():
    seen = []

    @progress_bar(description="Summing...")
    def total(n):
        acc = 0
        for i in range(1, n + 1):
            acc += i
            seen.append(i)
            yield i, n
        return acc

    assert total(4) == 10
    assert seen == [1, 2, 3, 4]


def test_progress_bar_with_no_steps():
    @progress_bar()
    def nothing():
        return "done"
        yield

    assert nothing() == "done"
