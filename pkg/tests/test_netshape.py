import pytest

from voxelforge.netshape import (
    LayerKind,
    LayerSpec,
    NonPositiveOutput,
    Padding,
    RowStatus,
    ShapeTable,
    infer_shape,
    load_builtin_tables,
    verify_table,
)


def conv(kernel, strides, features, padding=Padding.INFER):
    return LayerSpec(
        kind=LayerKind.CONVOLUTION, kernel=kernel, strides=strides,
        padding=padding, features=features,
    )


class TestInferShape:
    def test_same_conv_halves_extent(self):
        layer = conv((4, 4), (2, 2), 64)
        assert infer_shape(layer, (384, 384, 1), Padding.SAME) == (192, 192, 64)

    def test_valid_conv_9_cubed(self):
        layer = LayerSpec(LayerKind.CONVOLUTION, (9, 9, 9), (1, 1, 1), features=32)
        assert infer_shape(layer, (32, 32, 32, 1), Padding.VALID) == (24, 24, 24, 32)

    def test_valid_maxpool_3_cubed(self):
        layer = LayerSpec(LayerKind.MAX_POOLING, (3, 3, 3), (1, 1, 1))
        assert infer_shape(layer, (16, 16, 16, 64), Padding.VALID) == (14, 14, 14, 64)

    def test_same_stride1_is_identity(self):
        layer = conv((3, 3), (1, 1), 7)
        for extent in (1, 5, 384):
            out = infer_shape(layer, (extent, extent, 3), Padding.SAME)
            assert out[:2] == (extent, extent)

    def test_deconv_same_multiplies(self):
        layer = LayerSpec(LayerKind.DECONVOLUTION, (4, 4), (2, 2), features=64)
        assert infer_shape(layer, (24, 24, 512), Padding.SAME) == (48, 48, 64)

    def test_deconv_then_conv_round_trip(self):
        up = LayerSpec(LayerKind.DECONVOLUTION, (4, 4), (2, 2), features=8)
        down = conv((4, 4), (2, 2), 8)
        for extent in (12, 24, 96):
            grown = infer_shape(up, (extent, extent, 8), Padding.SAME)
            back = infer_shape(down, grown, Padding.SAME)
            assert back == (extent, extent, 8)

    def test_dense_keeps_spatial(self):
        layer = LayerSpec(LayerKind.DENSE, features=512)
        assert infer_shape(layer, (10, 10, 10, 128)) == (10, 10, 10, 512)

    def test_nonpositive_output_raises(self):
        layer = conv((9, 9), (1, 1), 4)
        with pytest.raises(NonPositiveOutput):
            infer_shape(layer, (4, 4, 1), Padding.VALID)


@pytest.fixture(scope="module")
def tables():
    return load_builtin_tables()


class TestVerifyBuiltinTables:

    def test_four_tables_bundled(self, tables):
        assert set(tables) == {
            "unet_generator",
            "pixtopix_discriminator",
            "synthesis3d_generator",
            "synthesis3d_discriminator",
        }

    def test_unet_generator_fully_matches(self, tables):
        report = verify_table(tables["unet_generator"])
        assert report.matched
        assert report.final_shape == (384, 384, 1)

    def test_synthesis_generator_fully_matches(self, tables):
        report = verify_table(tables["synthesis3d_generator"])
        assert report.matched
        assert report.final_shape == (16, 16, 16, 1)
        paddings = [r.padding for r in report.rows if r.layer.kind is LayerKind.CONVOLUTION]
        # the two 9-cubed kernels shrink (valid); everything else keeps extent
        assert paddings[0] is Padding.VALID
        assert paddings[4] is Padding.VALID
        assert all(p is Padding.SAME for i, p in enumerate(paddings) if i not in (0, 4))

    def test_pixtopix_discriminator_single_flag(self, tables):
        report = verify_table(tables["pixtopix_discriminator"])
        flagged = report.flagged
        assert len(flagged) == 1
        row = flagged[0]
        assert row.layer.kind is LayerKind.CONVOLUTION
        assert row.expected == (1, 24, 512)
        assert row.status is RowStatus.MISMATCH

    def test_synthesis_discriminator_single_flag(self, tables):
        report = verify_table(tables["synthesis3d_discriminator"])
        flagged = report.flagged
        assert len(flagged) == 1
        row = flagged[0]
        assert row.layer.kind is LayerKind.DENSE
        assert row.expected == (8, 8, 8, 512)
        assert row.computed == (10, 10, 10, 512)
        assert row.status is RowStatus.UNRESOLVABLE
        assert report.final_shape == (8, 8, 8, 1)

    def test_every_row_reported_exactly_once(self, tables):
        for table in tables.values():
            report = verify_table(table)
            assert len(report.rows) == len(table.rows)
            assert [r.index for r in report.rows] == list(range(len(table.rows)))

    def test_deterministic(self, tables):
        first = verify_table(tables["synthesis3d_discriminator"])
        second = verify_table(tables["synthesis3d_discriminator"])
        assert first == second


class TestTableValidation:
    def test_first_row_must_be_input(self):
        with pytest.raises(ValueError):
            ShapeTable("bad", ((conv((3, 3), (1, 1), 4), (4, 4, 4)),))

    def test_render_mentions_flags(self):
        tables = load_builtin_tables()
        text = verify_table(tables["pixtopix_discriminator"]).render()
        assert "mismatch" in text
        assert "1 flagged" in text
