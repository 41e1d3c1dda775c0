#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "emitterlab/errors.hpp"

// Photon detection event streams and their on-disk format.
//
// PTT1 layout, little-endian throughout:
//   32-byte header: magic "PTT1" | version u16 | channel count u16
//                   | duration (ps) u64 | record count u64 | reserved u64
//   records: 9 bytes each = time (ps) u64 | channel u8
// Times are integer picoseconds since acquisition start — finer than any
// timescale in play (IRF ~1.2 ns) and drift-free over long acquisitions.
namespace emitterlab {

struct TimeTag {
    std::int64_t time_ps = 0;
    std::uint8_t channel = 0;  // detector index, 0 or 1
    bool operator==(const TimeTag&) const = default;
};

struct StreamMeta {
    std::uint64_t seed = 0;
    std::string config_digest;  // in-memory provenance; not part of PTT1
};

struct TimeTagStream {
    std::vector<TimeTag> tags;       // sorted by time, non-decreasing
    std::uint64_t duration_ps = 0;   // acquisition span T
    StreamMeta meta;

    double duration_s() const { return static_cast<double>(duration_ps) * 1e-12; }
};

inline void validate(const TimeTagStream& s) {
    std::int64_t prev = 0;
    for (std::size_t i = 0; i < s.tags.size(); ++i) {
        const auto& t = s.tags[i];
        if (t.time_ps < 0) throw ConfigError("time tag " + std::to_string(i) + " is negative");
        if (t.channel > 1) throw ConfigError("time tag " + std::to_string(i) + " has channel > 1");
        if (t.time_ps < prev)
            throw ConfigError("time tags not sorted at index " + std::to_string(i));
        if (static_cast<std::uint64_t>(t.time_ps) > s.duration_ps)
            throw ConfigError("time tag " + std::to_string(i) + " beyond stream duration");
        prev = t.time_ps;
    }
}

namespace detail {

inline constexpr char ptt1_magic[4] = {'P', 'T', 'T', '1'};
inline constexpr std::uint16_t ptt1_version = 1;
inline constexpr std::size_t ptt1_header_size = 32;
inline constexpr std::size_t ptt1_record_size = 9;

inline void put_u16(unsigned char* p, std::uint16_t v) {
    p[0] = static_cast<unsigned char>(v);
    p[1] = static_cast<unsigned char>(v >> 8);
}
inline void put_u64(unsigned char* p, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) p[i] = static_cast<unsigned char>(v >> (8 * i));
}
inline std::uint16_t get_u16(const unsigned char* p) {
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}
inline std::uint64_t get_u64(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};

}  // namespace detail

// Incremental writer: records stream out as they are appended, header fields
// (duration, count) are back-patched on finalize, and the file only appears
// under its real name once complete (temp + rename).
class StreamWriter {
  public:
    explicit StreamWriter(const std::string& path) : path_(path), tmp_(path + ".tmp") {
        file_ = std::fopen(tmp_.c_str(), "wb");
        if (!file_) throw IoError("cannot open for writing: " + tmp_);
        unsigned char h[detail::ptt1_header_size] = {};
        std::memcpy(h, detail::ptt1_magic, 4);
        detail::put_u16(h + 4, detail::ptt1_version);
        detail::put_u16(h + 6, 2);  // channel count
        if (std::fwrite(h, 1, sizeof h, file_) != sizeof h)
            throw IoError("header write failed: " + tmp_);
        buf_.reserve(chunk_records * detail::ptt1_record_size);
    }

    StreamWriter(const StreamWriter&) = delete;
    StreamWriter& operator=(const StreamWriter&) = delete;

    ~StreamWriter() {
        if (file_) {
            std::fclose(file_);
            std::remove(tmp_.c_str());  // finalize never ran: drop the partial file
        }
    }

    void append(const TimeTag& t) {
        if (t.time_ps < 0) throw ConfigError("negative time tag");
        if (t.channel > 1) throw ConfigError("channel > 1");
        if (t.time_ps < last_time_) throw ConfigError("time tags must be appended in order");
        last_time_ = t.time_ps;
        unsigned char rec[detail::ptt1_record_size];
        detail::put_u64(rec, static_cast<std::uint64_t>(t.time_ps));
        rec[8] = t.channel;
        buf_.insert(buf_.end(), rec, rec + sizeof rec);
        ++count_;
        if (buf_.size() >= chunk_records * detail::ptt1_record_size) flush_buf();
    }

    void append(const std::vector<TimeTag>& tags) {
        for (const auto& t : tags) append(t);
    }

    std::uint64_t count() const { return count_; }
    std::int64_t last_time_ps() const { return last_time_; }

    void finalize(std::uint64_t duration_ps) {
        if (!file_) throw IoError("finalize called twice");
        if (count_ > 0 && static_cast<std::uint64_t>(last_time_) > duration_ps)
            throw ConfigError("stream duration shorter than last tag");
        flush_buf();
        unsigned char tail[16];
        detail::put_u64(tail, duration_ps);
        detail::put_u64(tail + 8, count_);
        if (std::fseek(file_, 8, SEEK_SET) != 0 ||
            std::fwrite(tail, 1, sizeof tail, file_) != sizeof tail)
            throw IoError("header back-patch failed: " + tmp_);
        if (std::fclose(file_) != 0) {
            file_ = nullptr;
            throw IoError("close failed: " + tmp_);
        }
        file_ = nullptr;
        std::error_code ec;
        std::filesystem::rename(tmp_, path_, ec);
        if (ec) throw IoError("rename failed: " + tmp_ + " -> " + path_ + ": " + ec.message());
    }

  private:
    static constexpr std::size_t chunk_records = 1 << 16;

    void flush_buf() {
        if (buf_.empty()) return;
        if (std::fwrite(buf_.data(), 1, buf_.size(), file_) != buf_.size())
            throw IoError("record write failed: " + tmp_);
        buf_.clear();
    }

    std::string path_, tmp_;
    std::FILE* file_ = nullptr;
    std::vector<unsigned char> buf_;
    std::uint64_t count_ = 0;
    std::int64_t last_time_ = 0;
};

// Chunked reader; validates monotonicity and channel range record by record
// and reports the byte offset where a malformed file stops making sense.
class StreamReader {
  public:
    explicit StreamReader(const std::string& path) : path_(path) {
        file_ = std::fopen(path.c_str(), "rb");
        if (!file_) throw IoError("cannot open: " + path);
        unsigned char h[detail::ptt1_header_size];
        std::size_t got = std::fread(h, 1, sizeof h, file_);
        if (got < sizeof h) throw FormatError("truncated header in " + path, got);
        if (std::memcmp(h, detail::ptt1_magic, 4) != 0)
            throw FormatError("bad magic in " + path, 0);
        if (detail::get_u16(h + 4) != detail::ptt1_version)
            throw FormatError("unsupported version in " + path, 4);
        if (detail::get_u16(h + 6) != 2)
            throw FormatError("unsupported channel count in " + path, 6);
        duration_ps_ = detail::get_u64(h + 8);
        records_ = detail::get_u64(h + 16);
    }

    StreamReader(const StreamReader&) = delete;
    StreamReader& operator=(const StreamReader&) = delete;
    ~StreamReader() {
        if (file_) std::fclose(file_);
    }

    std::uint64_t duration_ps() const { return duration_ps_; }
    std::uint64_t record_count() const { return records_; }
    bool done() const { return read_ == records_; }

    // Fills out with up to max tags; returns how many. 0 only at end of stream.
    std::size_t read(TimeTag* out, std::size_t max) {
        if (done() || max == 0) return 0;
        std::size_t want = static_cast<std::size_t>(
            std::min<std::uint64_t>(max, records_ - read_));
        buf_.resize(want * detail::ptt1_record_size);
        std::size_t got_bytes = std::fread(buf_.data(), 1, buf_.size(), file_);
        std::size_t got = got_bytes / detail::ptt1_record_size;
        if (got_bytes % detail::ptt1_record_size != 0)
            throw FormatError("truncated record in " + path_, offset_of(read_ + got));
        if (got < want) {
            if (std::ferror(file_)) throw IoError("read failed: " + path_);
            throw FormatError("fewer records than header declares in " + path_,
                              offset_of(read_ + got));
        }
        for (std::size_t i = 0; i < got; ++i) {
            const unsigned char* rec = buf_.data() + i * detail::ptt1_record_size;
            std::uint64_t t = detail::get_u64(rec);
            std::uint8_t ch = rec[8];
            if (t > static_cast<std::uint64_t>(INT64_MAX))
                throw FormatError("time overflows in " + path_, offset_of(read_ + i));
            if (ch > 1) throw FormatError("channel > 1 in " + path_, offset_of(read_ + i) + 8);
            if (static_cast<std::int64_t>(t) < last_time_)
                throw FormatError("non-monotone timestamps in " + path_, offset_of(read_ + i));
            if (t > duration_ps_)
                throw FormatError("tag beyond stated duration in " + path_,
                                  offset_of(read_ + i));
            last_time_ = static_cast<std::int64_t>(t);
            out[i] = TimeTag{static_cast<std::int64_t>(t), ch};
        }
        read_ += got;
        if (done() && std::fgetc(file_) != EOF)
            throw FormatError("trailing bytes after declared records in " + path_,
                              offset_of(records_));
        return got;
    }

  private:
    static std::uint64_t offset_of(std::uint64_t record_index) {
        return detail::ptt1_header_size + record_index * detail::ptt1_record_size;
    }

    std::string path_;
    std::FILE* file_ = nullptr;
    std::uint64_t duration_ps_ = 0, records_ = 0, read_ = 0;
    std::int64_t last_time_ = 0;
    std::vector<unsigned char> buf_;
};

inline void write_stream(const TimeTagStream& s, const std::string& path) {
    validate(s);
    StreamWriter w(path);
    w.append(s.tags);
    w.finalize(s.duration_ps);
}

inline TimeTagStream read_stream(const std::string& path) {
    StreamReader r(path);
    TimeTagStream s;
    s.duration_ps = r.duration_ps();
    s.tags.resize(r.record_count());
    std::size_t at = 0;
    while (!r.done()) at += r.read(s.tags.data() + at, std::size_t(1) << 16);
    s.tags.resize(at);
    return s;
}

// Per-channel count rates in counts/s — the R1, R2 of the normalization.
inline std::pair<double, double> count_rates(const TimeTagStream& s) {
    if (s.duration_ps == 0) throw ConfigError("count_rates: zero duration");
    std::uint64_t n[2] = {0, 0};
    for (const auto& t : s.tags) ++n[t.channel & 1];
    double T = s.duration_s();
    return {static_cast<double>(n[0]) / T, static_cast<double>(n[1]) / T};
}

// Two-way merge of sorted streams; ties keep the lower channel first so the
// result is deterministic.
inline TimeTagStream merge(const TimeTagStream& a, const TimeTagStream& b) {
    TimeTagStream out;
    out.duration_ps = std::max(a.duration_ps, b.duration_ps);
    out.meta = a.meta;
    out.tags.reserve(a.tags.size() + b.tags.size());
    std::size_t i = 0, j = 0;
    while (i < a.tags.size() && j < b.tags.size()) {
        const auto& x = a.tags[i];
        const auto& y = b.tags[j];
        bool take_a = (x.time_ps < y.time_ps) ||
                      (x.time_ps == y.time_ps && x.channel <= y.channel);
        out.tags.push_back(take_a ? a.tags[i++] : b.tags[j++]);
    }
    out.tags.insert(out.tags.end(), a.tags.begin() + i, a.tags.end());
    out.tags.insert(out.tags.end(), b.tags.begin() + j, b.tags.end());
    return out;
}

// Times (ps) of one channel only — the correlator works on bare timestamp
// vectors.
inline std::vector<std::int64_t> channel_times(const TimeTagStream& s, std::uint8_t channel) {
    std::vector<std::int64_t> out;
    for (const auto& t : s.tags)
        if (t.channel == channel) out.push_back(t.time_ps);
    return out;
}

}  // namespace emitterlab
