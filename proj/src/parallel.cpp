#include "mudjack/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <memory>
#include <mutex>
#include <thread>
#include <vector>

namespace mudjack {

namespace {

int resolve_worker_count() {
    if (const char* env = std::getenv("MUDJACK_THREADS")) {
        int n = std::atoi(env);
        if (n >= 1) {
            return n;
        }
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

struct Job {
    const std::function<void(int64_t, int64_t)>* fn = nullptr;
    int64_t n = 0;
    int64_t chunks = 0;
    int64_t per = 0;
    std::atomic<int64_t> next{0};
    std::atomic<int64_t> remaining{0};
};

class Pool {
  public:
    Pool() : workers_(std::max(0, worker_count_ - 1)) {
        for (size_t i = 0; i < workers_.size(); ++i) {
            workers_[i] = std::thread([this] { worker_loop(); });
        }
    }

    ~Pool() {
        {
            std::lock_guard<std::mutex> lock(mutex_);
            shutdown_ = true;
        }
        wake_.notify_all();
        for (auto& t : workers_) {
            t.join();
        }
    }

    int size() const { return worker_count_; }

    void run(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
        if (n <= 0) {
            return;
        }
        int64_t chunks = std::min<int64_t>(n, static_cast<int64_t>(worker_count_) * 4);
        if (chunks <= 1 || worker_count_ == 1) {
            fn(0, n);
            return;
        }
        auto job = std::make_shared<Job>();
        job->fn = &fn;
        job->n = n;
        job->chunks = chunks;
        job->per = (n + chunks - 1) / chunks;
        job->remaining.store(chunks, std::memory_order_relaxed);
        {
            std::lock_guard<std::mutex> lock(mutex_);
            current_ = job;
            ++generation_;
        }
        wake_.notify_all();
        work(*job);
        std::unique_lock<std::mutex> lock(mutex_);
        done_.wait(lock, [&] { return job->remaining.load(std::memory_order_acquire) == 0; });
        current_.reset();
    }

  private:
    static void work(Job& job) {
        while (true) {
            int64_t c = job.next.fetch_add(1, std::memory_order_relaxed);
            if (c >= job.chunks) {
                return;
            }
            int64_t begin = c * job.per;
            int64_t end = std::min(job.n, begin + job.per);
            if (begin < end) {
                (*job.fn)(begin, end);
            }
            job.remaining.fetch_sub(1, std::memory_order_acq_rel);
        }
    }

    void worker_loop() {
        uint64_t seen = 0;
        while (true) {
            std::shared_ptr<Job> job;
            {
                std::unique_lock<std::mutex> lock(mutex_);
                wake_.wait(lock, [&] { return shutdown_ || generation_ != seen; });
                if (shutdown_) {
                    return;
                }
                seen = generation_;
                job = current_;
            }
            if (!job) {
                continue;
            }
            work(*job);
            {
                std::lock_guard<std::mutex> lock(mutex_);
                done_.notify_all();
            }
        }
    }

    const int worker_count_ = resolve_worker_count();
    std::vector<std::thread> workers_;
    std::mutex mutex_;
    std::condition_variable wake_;
    std::condition_variable done_;
    std::shared_ptr<Job> current_;
    uint64_t generation_ = 0;
    bool shutdown_ = false;
};

Pool& pool() {
    static Pool p;
    return p;
}

}  // namespace

int worker_count() { return pool().size(); }

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn) { pool().run(n, fn); }

}  // namespace mudjack
