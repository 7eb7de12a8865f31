// SPDX-License-Identifier: Apache-2.0
#include <set>

#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "rfx/embeddings.hpp"
#include "rfx/rng.hpp"

using rfx::Tensor;

TEST_CASE("build_img_ids enumerates the grid row-major") {
    rfx::TokenIds one = rfx::build_img_ids(1, 1);
    REQUIRE(one.rows == std::vector<std::array<int64_t, 3>>{{0, 0, 0}});

    rfx::TokenIds four = rfx::build_img_ids(2, 2);
    REQUIRE(four.rows == std::vector<std::array<int64_t, 3>>{
                             {0, 0, 0}, {0, 0, 1}, {0, 1, 0}, {0, 1, 1}});

    rfx::TokenIds sixteen = rfx::build_img_ids(4, 4);
    REQUIRE(sixteen.count() == 16);
    REQUIRE(sixteen.rows.back() == std::array<int64_t, 3>{0, 3, 3});

    // row-major enumeration oracle + bijectivity onto the grid
    std::set<std::pair<int64_t, int64_t>> seen;
    for (int64_t i = 0; i < sixteen.count(); ++i) {
        const auto& r = sixteen.rows[static_cast<size_t>(i)];
        REQUIRE(r[0] == 0);
        REQUIRE(i == r[1] * 4 + r[2]);
        REQUIRE(r[1] >= 0);
        REQUIRE(r[1] < 4);
        REQUIRE(r[2] >= 0);
        REQUIRE(r[2] < 4);
        seen.insert({r[1], r[2]});
    }
    REQUIRE(seen.size() == 16);

    REQUIRE_THROWS_AS(rfx::build_img_ids(0, 3), std::invalid_argument);
}

TEST_CASE("build_text_ids pins tokens to the origin") {
    REQUIRE(rfx::build_text_ids(0).count() == 0);
    rfx::TokenIds three = rfx::build_text_ids(3);
    REQUIRE(three.count() == 3);
    for (const auto& r : three.rows) REQUIRE(r == std::array<int64_t, 3>{0, 0, 0});
    rfx::TokenIds cap = rfx::build_text_ids(512);
    REQUIRE(cap.count() == 512);
    for (const auto& r : cap.rows) REQUIRE(r == std::array<int64_t, 3>{0, 0, 0});
}

TEST_CASE("sinusoidal_embed") {
    Tensor zero = rfx::sinusoidal_embed(0.0, 8);
    for (int64_t j = 0; j < 4; ++j) {
        REQUIRE(zero.at(j) == 1.0);
        REQUIRE(zero.at(4 + j) == 0.0);
    }

    const double v = 1.37;
    Tensor pair = rfx::sinusoidal_embed(v, 2);
    REQUIRE(pair.at(0) == std::cos(v));
    REQUIRE(pair.at(1) == std::sin(v));

    Tensor any = rfx::sinusoidal_embed(123.456, 16);
    for (int64_t j = 0; j < 8; ++j) {
        REQUIRE(std::abs(any.at(j)) <= 1.0);
        const double c = any.at(j), s = any.at(8 + j);
        REQUIRE_THAT(c * c + s * s, Catch::Matchers::WithinAbs(1.0, 1e-12));
    }

    REQUIRE_THROWS_AS(rfx::sinusoidal_embed(1.0, 7), std::invalid_argument);
}

TEST_CASE("rope tables identities") {
    rfx::RopeConfig cfg{{4, 6, 6}, 10000.0};

    rfx::RopeTables zero_tables = rfx::build_rope_tables(rfx::build_text_ids(3), cfg);
    for (int64_t i = 0; i < zero_tables.cos.numel(); ++i) {
        REQUIRE(zero_tables.cos.data[i] == 1.0);
        REQUIRE(zero_tables.sin.data[i] == 0.0);
    }

    // single varying axis, axis_dim=2, id=1: the k=0 frequency is 1
    rfx::RopeConfig tiny{{2, 2, 2}, 10000.0};
    rfx::TokenIds id1;
    id1.rows = {{1, 0, 0}};
    rfx::RopeTables t1 = rfx::build_rope_tables(id1, tiny);
    REQUIRE(t1.cos.at(0, 0) == std::cos(1.0));
    REQUIRE(t1.cos.at(0, 1) == std::cos(1.0));
    REQUIRE(t1.sin.at(0, 0) == std::sin(1.0));
    REQUIRE(t1.sin.at(0, 1) == std::sin(1.0));

    // cos^2 + sin^2 = 1 entry-wise
    rfx::TokenIds grid = rfx::build_img_ids(5, 7);
    rfx::RopeTables tables = rfx::build_rope_tables(grid, cfg);
    for (int64_t i = 0; i < tables.cos.numel(); ++i) {
        const double c = tables.cos.data[i], s = tables.sin.data[i];
        REQUIRE_THAT(c * c + s * s, Catch::Matchers::WithinAbs(1.0, 1e-12));
    }

    // pure function of (ids, cfg): rebuilding gives bitwise-identical tables
    rfx::RopeTables again = rfx::build_rope_tables(grid, cfg);
    REQUIRE(oracle::tensor_hash(tables.cos) == oracle::tensor_hash(again.cos));
    REQUIRE(oracle::tensor_hash(tables.sin) == oracle::tensor_hash(again.sin));

    rfx::RopeConfig bad{{3, 6, 6}, 10000.0};
    REQUIRE_THROWS_AS(rfx::build_rope_tables(grid, bad), std::invalid_argument);
}

TEST_CASE("apply_rope rotates pairs") {
    // zero-position tables are the identity rotation
    rfx::RopeConfig cfg{{4, 6, 6}, 10000.0};
    rfx::RopeTables id_tables = rfx::build_rope_tables(rfx::build_text_ids(2), cfg);
    rfx::Rng rng(12);
    Tensor x = rng.normal({2, 16});
    REQUIRE(rfx::apply_rope(x, id_tables).data == x.data);

    // quarter turn: (1,0) -> (0,1)
    rfx::RopeTables quarter;
    quarter.cos = Tensor::from({1, 2}, {std::cos(M_PI / 2), std::cos(M_PI / 2)});
    quarter.sin = Tensor::from({1, 2}, {std::sin(M_PI / 2), std::sin(M_PI / 2)});
    Tensor unit = Tensor::from({1, 2}, {1, 0});
    Tensor turned = rfx::apply_rope(unit, quarter);
    REQUIRE_THAT(turned.at(0, 0), Catch::Matchers::WithinAbs(0.0, 1e-12));
    REQUIRE_THAT(turned.at(0, 1), Catch::Matchers::WithinAbs(1.0, 1e-12));

    REQUIRE_THROWS_AS(rfx::apply_rope(Tensor({3, 16}), id_tables), std::invalid_argument);
}

TEST_CASE("apply_rope preserves norms and inverts") {
    rfx::RopeConfig cfg{{4, 6, 6}, 10000.0};
    rfx::TokenIds ids = rfx::build_img_ids(4, 8);
    rfx::RopeTables tables = rfx::build_rope_tables(ids, cfg);
    rfx::Rng rng(13);
    Tensor x = rng.normal({32, 16});
    Tensor y = rfx::apply_rope(x, tables);
    for (int64_t i = 0; i < 32; ++i) {
        double nx = 0.0, ny = 0.0;
        for (int64_t j = 0; j < 16; ++j) {
            nx += x.at(i, j) * x.at(i, j);
            ny += y.at(i, j) * y.at(i, j);
        }
        REQUIRE_THAT(std::sqrt(ny), Catch::Matchers::WithinAbs(std::sqrt(nx), 1e-10));
    }

    // rotation with negated ids (= transpose) recovers the input
    Tensor back = rfx::apply_rope_transpose(y, tables);
    for (int64_t i = 0; i < back.numel(); ++i)
        REQUIRE_THAT(back.data[i], Catch::Matchers::WithinAbs(x.data[i], 1e-10));
}

TEST_CASE("rope relative-position identity on a single axis") {
    // <R_m q, R_n k> = <R_{m-n} q, k> for positions on one varying axis
    rfx::RopeConfig cfg{{4, 6, 6}, 10000.0};
    rfx::Rng rng(14);
    int checked = 0;
    while (checked < 200) {
        const auto m = static_cast<int64_t>(rng.next_uniform() * 64) - 32;
        const auto n = static_cast<int64_t>(rng.next_uniform() * 64) - 32;
        if (std::abs(m - n) > 32) continue;
        Tensor q = rng.normal({1, 16});
        Tensor k = rng.normal({1, 16});

        rfx::TokenIds pos_m, pos_n, pos_diff;
        pos_m.rows = {{0, m, 0}};
        pos_n.rows = {{0, n, 0}};
        pos_diff.rows = {{0, m - n, 0}};

        Tensor qm = rfx::apply_rope(q, rfx::build_rope_tables(pos_m, cfg));
        Tensor kn = rfx::apply_rope(k, rfx::build_rope_tables(pos_n, cfg));
        Tensor qd = rfx::apply_rope(q, rfx::build_rope_tables(pos_diff, cfg));

        double lhs = 0.0, rhs = 0.0;
        for (int64_t j = 0; j < 16; ++j) {
            lhs += qm.at(0, j) * kn.at(0, j);
            rhs += qd.at(0, j) * k.at(0, j);
        }
        REQUIRE_THAT(lhs, Catch::Matchers::WithinAbs(rhs, 1e-8));
        ++checked;
    }
}
