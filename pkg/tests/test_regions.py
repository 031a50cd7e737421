import numpy as np
import pytest

from saddlelmm.regions import EMPTY, WHOLE, RegionSyntaxError, parse_region

PTS = np.array([[0.5, 0.5], [-0.5, 0.5], [-0.5, -0.5], [0.5, -0.5], [0.1, 0.05], [0.0, 0.7]])


def mask(text):
    return parse_region(text)(PTS[:, 0], PTS[:, 1])


class TestParse:
    @pytest.mark.parametrize(
        "text, expected",
        [
            ("x1>0", [1, 0, 0, 1, 1, 0]),
            ("x1>0,x2>0", [1, 0, 0, 0, 1, 0]),
            ("x1>0 and x2>0", [1, 0, 0, 0, 1, 0]),
            ("x1<0 or x2<0", [0, 1, 1, 1, 0, 0]),
            ("x1x2>0", [1, 0, 1, 0, 1, 0]),
            ("x1*x2<0", [0, 1, 0, 1, 0, 0]),
            ("|x1|>|x2|", [0, 0, 0, 0, 1, 0]),
            ("|x1+x2|>0.3", [1, 0, 1, 0, 0, 1]),
            ("x1^2+x2^2>0.25", [1, 1, 1, 1, 0, 1]),
            ("|x|<0.2", [0, 0, 0, 0, 1, 0]),
            ("(x1-0.5)^2+(x2-0.5)**2<0.01", [1, 0, 0, 0, 0, 0]),
            ("not x1>0", [0, 1, 1, 0, 0, 1]),
            ("{x1>0, (x2>0 or x2<-0.4)}", [1, 0, 0, 1, 1, 0]),
            ("-x1>0", [0, 1, 1, 0, 0, 0]),
        ],
    )
    def test_predicates(self, text, expected):
        np.testing.assert_array_equal(mask(text), np.array(expected, dtype=bool))

    def test_whole_and_empty_words(self):
        assert mask("Omega").all()
        assert not mask("empty").any()
        assert WHOLE(0.3, 0.2) and not EMPTY(0.3, 0.2)
        assert parse_region("none").is_empty_word

    @pytest.mark.parametrize("text", ["", "x1 >", "x1 > 0)", "y>0", "x>0", "x1 = 0", "x1 > 0 and"])
    def test_syntax_errors(self, text):
        with pytest.raises(RegionSyntaxError):
            parse_region(text)


class TestFraction:
    def test_interface_node_gets_half(self):
        coords = np.array([[0.0, 0.3], [0.1, 0.3], [-0.1, 0.3]])
        frac = parse_region("x1>0").fraction(coords, h=0.1)
        np.testing.assert_allclose(frac, [0.5, 1.0, 0.0])

    def test_fraction_in_unit_interval(self):
        rng = np.random.default_rng(0)
        coords = rng.uniform(-1, 1, size=(200, 2))
        frac = parse_region("x1^2+x2^2<0.3").fraction(coords, h=0.05)
        assert np.all((frac >= 0) & (frac <= 1))
